"""Per-node manager and sandboxed single-task workers."""
