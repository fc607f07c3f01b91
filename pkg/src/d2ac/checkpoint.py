"""Checkpoints: a ``manifest.txt`` of ``key = value`` lines plus one raw blob per array.

Blobs hold little-endian float64 values in row-major order. Every parameter
is stored with its AdamW moments (``.m``/``.v`` blobs) and step count so a
resumed run continues the optimizer exactly.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import ModelError

FORMAT = "d2ac-checkpoint/1"
MANIFEST = "manifest.txt"


def agent_parameters(agent) -> list:
    params = [p for net in agent.networks().values() for p in net.params()]
    params += list(agent.extra_params())
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ModelError("parameter names are not unique")
    return params


def _write_blob(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blob(path: str, shape: tuple[int, ...]) -> np.ndarray:
    with open(path, "rb") as fh:
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ModelError(f"{path}: expected {shape}, found {data.size} values")
    return data.reshape(shape).astype(np.float64)


def save_checkpoint(directory: str, agent, meta: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = [f"format = {FORMAT}"]
    for key in sorted(meta or {}):
        lines.append(f"meta.{key} = {meta[key]}")
    lines.append(f"meta.updates = {agent.updates}")
    for p in agent_parameters(agent):
        shape = "x".join(str(d) for d in p.value.shape) or "scalar"
        lines.append(f"param.{p.name} = {shape} step={p.step_count}")
        _write_blob(os.path.join(directory, f"{p.name}.bin"), p.value)
        _write_blob(os.path.join(directory, f"{p.name}.m.bin"), p.m)
        _write_blob(os.path.join(directory, f"{p.name}.v.bin"), p.v)
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory: str) -> tuple[dict[str, str], dict[str, tuple[tuple[int, ...], int]]]:
    meta: dict[str, str] = {}
    params: dict[str, tuple[tuple[int, ...], int]] = {}
    with open(os.path.join(directory, MANIFEST), encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key == "format":
                if value != FORMAT:
                    raise ModelError(f"unsupported checkpoint format {value!r}")
            elif key.startswith("meta."):
                meta[key[5:]] = value
            elif key.startswith("param."):
                shape_s, _, step_s = value.partition(" step=")
                shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
                params[key[6:]] = (shape, int(step_s))
            else:
                raise ModelError(f"manifest line {line_no}: unexpected key {key!r}")
    return meta, params


def load_checkpoint(directory: str, agent) -> dict[str, str]:
    """Restore parameters, moments and step counts into ``agent``; returns the metadata."""
    meta, stored = read_manifest(directory)
    params = agent_parameters(agent)
    names = {p.name for p in params}
    if names != set(stored):
        missing = sorted(names - set(stored))
        extra = sorted(set(stored) - names)
        raise ModelError(f"checkpoint does not match agent (missing {missing[:3]}, unexpected {extra[:3]})")
    for p in params:
        shape, step = stored[p.name]
        if tuple(shape) != p.value.shape:
            raise ModelError(f"{p.name}: checkpoint shape {shape} vs agent {p.value.shape}")
        p.value[...] = _read_blob(os.path.join(directory, f"{p.name}.bin"), shape)
        p.m[...] = _read_blob(os.path.join(directory, f"{p.name}.m.bin"), shape)
        p.v[...] = _read_blob(os.path.join(directory, f"{p.name}.v.bin"), shape)
        p.step_count = step
    for net in agent.networks().values():
        net.bump()
    agent.updates = int(meta.get("updates", 0))
    return meta
