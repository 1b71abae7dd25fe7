"""Self-describing binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic b"BRCP"
    bytes 4..7    uint32 format version (currently 1)
    bytes 8..11   uint32 header length in bytes
    header        UTF-8 JSON: model structure (class, mechanisms, rotation
                  bins, transform bounds, anchor), per-array shapes, RNG
                  seed, training iteration count, optimizer hyperparameters
    payload       the parameter arrays in declaration order as raw
                  little-endian float32, C order; when optimizer state is
                  saved, its first- and second-moment arrays follow in the
                  same order

Save -> load -> save is bitwise stable.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .codec import RotationBins, TransformBounds
from .network import BlockParams, BoxRefiner, OptimizerState

MAGIC = b"BRCP"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _block_structure(block: BlockParams):
    return {
        "point_layers": [[list(w.shape), list(b.shape)] for w, b in block.point_layers],
        "head_layers": [[list(w.shape), list(b.shape)] for w, b in block.head_layers],
    }


def _rebuild_block(structure, arrays_iter) -> BlockParams:
    point_layers = [(next(arrays_iter), next(arrays_iter)) for _ in structure["point_layers"]]
    head_layers = [(next(arrays_iter), next(arrays_iter)) for _ in structure["head_layers"]]
    return BlockParams(point_layers, head_layers)


def save_checkpoint(
    path,
    model: BoxRefiner,
    seed: int = 0,
    iteration: int = 0,
    opt_state: OptimizerState | None = None,
) -> None:
    params = list(model.param_arrays())
    header = {
        "class": model.obj_class,
        "mechanisms": model.mechanisms,
        "n_bins": model.bins.n_bins,
        "bounds": {
            "t_xyz": list(model.bounds.t_xyz),
            "t_r": model.bounds.t_r,
            "t_s_xy": model.bounds.t_s_xy,
            "t_s_z": model.bounds.t_s_z,
        },
        "anchor": list(model.anchor),
        "stages": [
            {"kind": kind, **_block_structure(block)} for kind, block in model.stages
        ],
        "head": _block_structure(model.head),
        "shapes": [list(p.shape) for p in params],
        "seed": int(seed),
        "iteration": int(iteration),
        "optimizer": None
        if opt_state is None
        else {
            "kind": opt_state.kind,
            "lr": opt_state.lr,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "step": opt_state.step,
        },
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, np.uint32(VERSION).tobytes(), np.uint32(len(header_bytes)).tobytes(), header_bytes]
    for p in params:
        chunks.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    if opt_state is not None:
        for arr in list(opt_state.m) + list(opt_state.v):
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, dtype=np.float32):
    """Returns (model, meta, opt_state) where meta has 'seed' and 'iteration'."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int(np.frombuffer(data[4:8], "<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header_len = int(np.frombuffer(data[8:12], "<u4")[0])
    try:
        header = json.loads(data[12 : 12 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc

    offset = 12 + header_len
    shapes = [tuple(s) for s in header["shapes"]]
    n_param_floats = sum(int(np.prod(s)) for s in shapes)
    n_state = 2 * n_param_floats if header["optimizer"] is not None else 0
    expected = offset + 4 * (n_param_floats + n_state)
    if len(data) != expected:
        raise CheckpointError(
            f"{path}: payload length {len(data) - offset} bytes, expected {expected - offset}"
        )

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(data, "<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        return arr.astype(dtype)

    params = [take(s) for s in shapes]
    arrays_iter = iter(params)
    stages = [
        (spec["kind"], _rebuild_block(spec, arrays_iter)) for spec in header["stages"]
    ]
    head = _rebuild_block(header["head"], arrays_iter)
    model = BoxRefiner(
        obj_class=header["class"],
        stages=stages,
        head=head,
        bounds=TransformBounds(
            t_xyz=tuple(header["bounds"]["t_xyz"]),
            t_r=header["bounds"]["t_r"],
            t_s_xy=header["bounds"]["t_s_xy"],
            t_s_z=header["bounds"]["t_s_z"],
        ),
        bins=RotationBins(header["n_bins"]),
        anchor=tuple(header["anchor"]),
    )
    opt_state = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        m = [take(s) for s in shapes]
        v = [take(s) for s in shapes]
        opt_state = OptimizerState(
            kind=o["kind"], lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"],
            eps=o["eps"], step=o["step"], m=m, v=v,
        )
    meta = {"seed": header["seed"], "iteration": header["iteration"]}
    return model, meta, opt_state
