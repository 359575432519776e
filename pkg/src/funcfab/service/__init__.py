"""Coordinator: HTTP API, registries, durable per-endpoint queues, memo
cache, and one forwarder per registered endpoint."""
