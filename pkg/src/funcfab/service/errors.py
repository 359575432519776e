"""Errors surfaced by coordinator operations, mapped onto HTTP statuses."""

from __future__ import annotations


class ServiceError(Exception):
    status = 500
    code = "ServiceError"

    def payload(self) -> dict:
        return {"error": self.code, "message": str(self)}


class Unauthorized(ServiceError):
    status = 401
    code = "Unauthorized"


class UnknownFunction(ServiceError):
    status = 404
    code = "UnknownFunction"


class UnknownEndpoint(ServiceError):
    status = 404
    code = "UnknownEndpoint"


class UnknownTask(ServiceError):
    status = 404
    code = "UnknownTask"


class PayloadTooLarge(ServiceError):
    status = 413
    code = "PayloadTooLarge"

    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__("payload of %d bytes exceeds cap of %d bytes" % (size, cap))

    def payload(self) -> dict:
        return {"error": self.code, "message": str(self), "cap": self.cap}


class NotReady(ServiceError):
    status = 202
    code = "NotReady"

    def __init__(self, state: str):
        self.state = state
        super().__init__("task is not terminal yet (state %s)" % state)

    def payload(self) -> dict:
        return {"error": self.code, "state": self.state}


class TaskFailed(ServiceError):
    status = 409
    code = "TaskFailed"

    def __init__(self, error: dict):
        self.error = error
        super().__init__(error.get("message", "task failed"))

    def payload(self) -> dict:
        return {"error": self.code, "task_error": self.error}


class ResultPurged(ServiceError):
    status = 410
    code = "ResultPurged"


class BadRequest(ServiceError):
    status = 400
    code = "BadRequest"
