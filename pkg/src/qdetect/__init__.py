"""qdetect: a software twin of an FPGA-based trapped-ion qubit readout pipeline.

The package generates synthetic EMCCD ion images, trains and evaluates three
state classifiers (ROI thresholding, a LUT-compiled sparse quantized
polynomial MLP, and a fixed-point Vision Transformer), and simulates the
camera-to-decision pipeline at clock-cycle granularity.

Submodules
----------
dataset     synthetic fluorescence images, persistence, ROI histograms
threshold   photon-count threshold baseline (calibration + classification)
polymlp     sparse quantized polynomial MLP and its truth-table compilation
vit         simplified Vision Transformer with hand-written backpropagation
fixedpoint  bit-exact signed fixed-point arithmetic emulation
timingsim   discrete-event simulation of frame/line/DNN timing
fidelity    mean measurement fidelity (MMF) and comparison reports
pipeline    end-to-end preset workflows
cli         the ``qdetect`` command-line entry point
"""

__version__ = "0.1.0"
