"""quantnas: joint search of network architecture, fixed-point quantization,
and FPGA implementation under LUT/throughput specifications."""

__version__ = "0.1.0"
