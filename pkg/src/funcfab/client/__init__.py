"""HTTP client for the coordinator API."""

from funcfab.client.http import ClientError, FabricClient, TaskFailedError, TaskTimeout

__all__ = ["FabricClient", "ClientError", "TaskFailedError", "TaskTimeout"]
