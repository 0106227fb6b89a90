"""Model checkpoint format.

A checkpoint is an uncompressed ``.npz`` archive holding one float32 array
per named parameter plus a ``__meta__`` entry: a UTF-8 JSON document with
the format version, the model construction arguments, the per-parameter
group assignment, and the group table (name plus frozen flag). No pickled
objects anywhere, so checkpoints are safe to load from untrusted sources
and stable across library versions.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .decoder import RestorationModel
from .errors import StreamFormatError

CHECKPOINT_VERSION = 1
META_KEY = "__meta__"


def _group_assignment(model: RestorationModel) -> dict[str, str]:
    """Map each named parameter to its parameter-group name."""
    assignment: dict[str, str] = {}
    for gname, params in model.parameter_groups().items():
        ids = {id(p) for p in params}
        for pname, p in model.named_parameters():
            if id(p) in ids:
                assignment[pname] = gname
    return assignment


def build_meta(model: RestorationModel, extra: dict | None = None) -> dict:
    shapes = {name: list(p.shape) for name, p in model.named_parameters()}
    return {
        "version": CHECKPOINT_VERSION,
        "model": {
            "c_lat": model.backbone.in_conv.in_channels,
            "sem_channels": model.backbone.sem2.w_k.in_features,
            "emb_dim": model.emb_dim,
        },
        "groups": {
            name: {"frozen": name == "frozen"}
            for name in model.parameter_groups()
        },
        "param_groups": _group_assignment(model),
        "shapes": shapes,
        "extra": extra or {},
    }


def save_checkpoint(
    model: RestorationModel, path: str | Path, extra: dict | None = None
) -> None:
    arrays = {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.named_parameters()
    }
    meta_blob = np.frombuffer(
        json.dumps(build_meta(model, extra)).encode("utf-8"), dtype=np.uint8
    )
    # np.savez appends .npz to string paths; open the file ourselves so the
    # checkpoint lands exactly where asked.
    with open(Path(path), "wb") as fh:
        np.savez(fh, **{META_KEY: meta_blob}, **arrays)


def read_meta(path: str | Path) -> dict:
    with np.load(Path(path)) as archive:
        if META_KEY not in archive:
            raise StreamFormatError("checkpoint missing metadata entry")
        return json.loads(bytes(archive[META_KEY]).decode("utf-8"))


def load_checkpoint(path: str | Path) -> tuple[RestorationModel, dict]:
    import torch

    path = Path(path)
    meta = read_meta(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise StreamFormatError(
            f"unsupported checkpoint version {meta.get('version')!r}"
        )
    cfg = meta["model"]
    model = RestorationModel(
        c_lat=cfg["c_lat"], sem_channels=cfg["sem_channels"], emb_dim=cfg["emb_dim"]
    )
    with np.load(path) as archive:
        loaded: dict[str, torch.Tensor] = {}
        for name, p in model.named_parameters():
            if name not in archive:
                raise StreamFormatError(f"checkpoint missing parameter {name!r}")
            arr = archive[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise StreamFormatError(
                    f"parameter {name!r} has shape {tuple(arr.shape)}, "
                    f"expected {tuple(p.shape)}"
                )
            loaded[name] = torch.from_numpy(arr.copy())
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(loaded[name])
    model.apply_freezing_policy()
    return model, meta
