"""Request and response models for the endpoint HTTP API."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class RegisterRequest(BaseModel):
    name: str


class RegisterResponse(BaseModel):
    function_id: str
    name: str


class RunRequest(BaseModel):
    function_id: str
    payload: Any = None


class RunResponse(BaseModel):
    task_id: str


class TaskStatus(BaseModel):
    task_id: str
    function_id: str
    state: str
    result: Any = None
    error: Optional[str] = None
    timestamps: dict[str, float] = Field(default_factory=dict)


class Health(BaseModel):
    ok: bool = True
    workers: int
    queued: int
    running: int
    catalog: list[str]
