"""medserve: desk-scale serving-optimization toolkit for specialized models.

Subsystems: keyword query routing and prompt composition, low-rank adapter
arithmetic, distillation loss machinery with a toy training loop, blockwise
NF4/INT8 quantization with mixed-precision planning, layer-to-device
placement, a two-tier semantic response cache, an inference runtime
(plan cache, tiled attention, continuous batching, engine selection), and a
small HTTP service plus CLI wiring it all together.
"""

__version__ = "0.1.0"
