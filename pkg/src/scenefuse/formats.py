"""On-disk formats: scene and prediction JSON Lines, parameter checkpoints.

Floats are written with Python's shortest round-trip repr, so reading a
scene file back yields bit-identical arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scenefuse.scene import Modality, Scene


class FormatError(ValueError):
    pass


def _array_out(a: np.ndarray) -> dict:
    a = np.asarray(a)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _array_in(obj, dtype, where: str) -> np.ndarray:
    try:
        shape = tuple(int(n) for n in obj["shape"])
        arr = np.asarray(obj["data"], dtype=dtype)
        return arr.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: bad array record ({exc})") from exc


# ----------------------------------------------------------------------------
# scenes


def scene_to_json(scene: Scene) -> str:
    rec = {
        "scene_id": scene.scene_id,
        "ego_index": int(scene.ego_index),
        "meta": scene.meta,
        "future": _array_out(scene.future),
        "modalities": {
            name: {"values": _array_out(m.values), "mask": _array_out(m.mask.astype(np.uint8))}
            for name, m in scene.modalities.items()
        },
    }
    return json.dumps(rec, separators=(",", ":"), allow_nan=False)


def scene_from_json(line: str, where: str = "scene") -> Scene:
    try:
        rec = json.loads(line)
        mods = {}
        for name, m in rec["modalities"].items():
            values = _array_in(m["values"], np.float64, f"{where}.{name}.values")
            mask = _array_in(m["mask"], np.uint8, f"{where}.{name}.mask").astype(bool)
            mods[name] = Modality(name, values, mask)
        future = _array_in(rec["future"], np.float64, f"{where}.future")
        return Scene(mods, future, int(rec["ego_index"]), str(rec["scene_id"]), rec.get("meta", {}))
    except FormatError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from exc


def write_scenes(path, scenes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(scene_to_json(s))
            fh.write("\n")


def read_scenes(path) -> list[Scene]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                out.append(scene_from_json(line, f"{path.name}:{i}"))
    if not out:
        raise FormatError(f"{path}: no scenes")
    return out


# ----------------------------------------------------------------------------
# predictions


@dataclass
class Prediction:
    scene_id: str
    agent: int
    probabilities: np.ndarray   # [k]
    means: np.ndarray           # [k, T_f, 2] world frame
    logstd: np.ndarray          # [k, T_f, 2]

    @property
    def k(self) -> int:
        return len(self.probabilities)


def prediction_to_json(p: Prediction, manifest: str | None = None) -> str:
    rec = {
        "scene_id": p.scene_id,
        "agent": int(p.agent),
        "k": p.k,
        "probabilities": np.asarray(p.probabilities, np.float64).tolist(),
        "means": np.asarray(p.means, np.float64).tolist(),
        "logstd": np.asarray(p.logstd, np.float64).tolist(),
    }
    if manifest is not None:
        rec["manifest"] = manifest
    return json.dumps(rec, separators=(",", ":"), allow_nan=False)


def prediction_from_json(line: str, where: str = "prediction") -> Prediction:
    try:
        rec = json.loads(line)
        p = Prediction(str(rec["scene_id"]), int(rec["agent"]),
                       np.asarray(rec["probabilities"], np.float64),
                       np.asarray(rec["means"], np.float64),
                       np.asarray(rec["logstd"], np.float64))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from exc
    k = int(rec["k"])
    if p.probabilities.shape != (k,) or p.means.ndim != 3 or p.means.shape[0] != k \
            or p.means.shape[2] != 2 or p.logstd.shape != p.means.shape:
        raise FormatError(f"{where}: arrays do not match k={k}")
    return p


def write_predictions(path, preds, manifest: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(prediction_to_json(p, manifest))
            fh.write("\n")


def read_predictions(path) -> list[Prediction]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                out.append(prediction_from_json(line, f"{path.name}:{i}"))
    if not out:
        raise FormatError(f"{path}: no predictions")
    return out


# ----------------------------------------------------------------------------
# checkpoints


_META_KEY = "__meta__"


def save_checkpoint(path, named_params: dict, config_hash: str, extra: dict | None = None) -> None:
    """Store every parameter array with its name and shape plus the config hash."""
    arrays = {name: np.asarray(t.data if hasattr(t, "data") else t) for name, t in named_params.items()}
    if _META_KEY in arrays:
        raise FormatError(f"parameter name {_META_KEY!r} is reserved")
    meta = {
        "config_hash": config_hash,
        "names": list(arrays),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "dtypes": {k: str(v.dtype) for k, v in arrays.items()},
        **(extra or {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{_META_KEY: np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)})


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z[_META_KEY].tobytes().decode())
            arrays = {k: z[k] for k in meta["names"]}
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    for k, a in arrays.items():
        if list(a.shape) != meta["shapes"][k]:
            raise FormatError(f"{path}: {k} has shape {a.shape}, header says {meta['shapes'][k]}")
    return arrays, meta


def restore_parameters(module, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into ``module``'s parameters; names and shapes must match."""
    params = module.named_parameters()
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise FormatError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        a = arrays[name]
        if a.shape != p.data.shape:
            raise FormatError(f"{name}: checkpoint shape {a.shape}, model expects {p.data.shape}")
        p.data = a.astype(p.data.dtype, copy=True)
