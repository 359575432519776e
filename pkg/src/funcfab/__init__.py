"""funcfab: a federated function-serving fabric.

A coordinator service with per-endpoint durable queues and forwarders,
endpoint agents that provision node managers and sandboxed workers, and a
benchmark harness for driving the whole fabric on one machine.
"""

__version__ = "0.1.0"
