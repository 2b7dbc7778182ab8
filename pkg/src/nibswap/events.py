"""Network events flowing from switches to applications, and control messages."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .policy import Packet


@dataclass(frozen=True)
class PacketIn:
    switch: str
    port: int
    packet: Packet


@dataclass(frozen=True)
class SwitchUp:
    switch: str
    ports: tuple  # ((port, capacity_bps), ...)


@dataclass(frozen=True)
class SwitchDown:
    switch: str


@dataclass(frozen=True)
class PortStats:
    switch: str
    port: int
    tx_bytes: int
    rx_bytes: int
    at: float


EVENT_KINDS = {"PacketIn": PacketIn, "SwitchUp": SwitchUp,
               "SwitchDown": SwitchDown, "PortStats": PortStats}


def event_kind(ev) -> str:
    return type(ev).__name__


# control messages between updc, platform and apps

@dataclass(frozen=True)
class Quiesce:
    reply_to: Any  # Mailbox


@dataclass(frozen=True)
class QuiesceAck:
    app_id: str
    graceful: bool = True


@dataclass(frozen=True)
class PolicyPushed:
    app_id: str
    version: str
    changed: bool = True


@dataclass(frozen=True)
class Swapped:
    apps: tuple = ()


@dataclass(frozen=True)
class AppCrashed:
    app_id: str
    version: str
    error: Any = field(default=None, compare=False)
