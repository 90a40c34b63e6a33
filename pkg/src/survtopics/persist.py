"""Model directories: a JSON manifest plus raw little-endian float64 arrays.

Layout::

    model/
      manifest.json      format version, config, dimensions, vocabularies,
                         prior model, guide map, sha256 of every array file
      alpha.bin, w.bin, baseline_times.bin, baseline_cumhaz.bin,
      phi_<m>.bin, beta_<m>.bin, train_gamma_bar.bin

Arrays are written verbatim (``<f8``, C order), so a round trip is exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .corpus import GuideMap, Vocabulary
from .inference import Hyperparams, TrainConfig, TrainedModel
from .prior import PriorModel
from .survival import BaselineHazard

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class ModelFormatError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_array(root: Path, name: str, arr: np.ndarray, files: dict) -> None:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    (root / name).write_bytes(data)
    files[name] = {"sha256": hashlib.sha256(data).hexdigest(), "shape": list(np.shape(arr))}


def _read_array(root: Path, name: str, files: dict) -> np.ndarray:
    entry = files.get(name)
    if entry is None:
        raise ModelFormatError(f"manifest does not list {name}")
    try:
        data = (root / name).read_bytes()
    except FileNotFoundError:
        raise ModelFormatError(f"missing array file {name}") from None
    if hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise ModelFormatError(f"checksum mismatch in {name}")
    return np.frombuffer(data, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def save_model(model: TrainedModel, path, extra: dict | None = None) -> Path:
    """Write ``model`` to directory ``path`` (created if needed)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files: dict = {}
    hp = model.hyperparams
    _write_array(root, "alpha.bin", hp.alpha, files)
    for m, (phi, beta) in enumerate(zip(model.phi, hp.beta)):
        _write_array(root, f"phi_{m}.bin", phi, files)
        _write_array(root, f"beta_{m}.bin", beta, files)
    if model.w is not None:
        _write_array(root, "w.bin", model.w, files)
    if model.baseline is not None:
        _write_array(root, "baseline_times.bin", model.baseline.event_times, files)
        _write_array(root, "baseline_cumhaz.bin", model.baseline.cumulative, files)
    if model.train_gamma_bar is not None:
        _write_array(root, "train_gamma_bar.bin", model.train_gamma_bar, files)
    cfg = model.config.to_dict()
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": model.config.seed,
        "dims": {"K": model.K, "M": len(model.phi), "V": [p.shape[1] for p in model.phi]},
        "hyper_hyperparameters": {"a_alpha": hp.a_alpha, "b_alpha": hp.b_alpha,
                                  "a_beta": hp.a_beta, "b_beta": hp.b_beta},
        "vocabularies": [{"modality_id": v.modality_id, "name": v.name, "features": list(v.feature_ids)}
                         for v in model.vocabularies],
        "prior_model": None if model.prior_model is None else model.prior_model.to_dict(),
        "guide_modality": model.guide_modality,
        "guide_map": None if model.guide is None else [list(p) for p in model.guide.pairs()],
        "history": model.history,
        "n_sweeps": model.n_sweeps,
        "converged": model.converged,
        "files": files,
    }
    if extra:
        manifest["extra"] = extra
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_model(path) -> TrainedModel:
    """Read a directory written by :func:`save_model`, verifying checksums."""
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise ModelFormatError(f"{root} has no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt manifest: {exc}") from None
    version = manifest.get("format_version")
    if not isinstance(version, int) or version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version!r} (expected {FORMAT_VERSION})")
    files = manifest["files"]
    M = manifest["dims"]["M"]
    hh = manifest["hyper_hyperparameters"]
    hyper = Hyperparams(_read_array(root, "alpha.bin", files),
                        [_read_array(root, f"beta_{m}.bin", files) for m in range(M)], **hh)
    baseline = None
    if "baseline_times.bin" in files:
        baseline = BaselineHazard(_read_array(root, "baseline_times.bin", files),
                                  _read_array(root, "baseline_cumhaz.bin", files))
    vocabs = tuple(Vocabulary(v["modality_id"], v["name"], tuple(v["features"]))
                   for v in manifest["vocabularies"])
    pm = manifest.get("prior_model")
    gm = manifest.get("guide_map")
    return TrainedModel(
        config=TrainConfig(**manifest["config"]),
        vocabularies=vocabs,
        hyperparams=hyper,
        phi=[_read_array(root, f"phi_{m}.bin", files) for m in range(M)],
        w=_read_array(root, "w.bin", files) if "w.bin" in files else None,
        baseline=baseline,
        prior_model=None if pm is None else PriorModel.from_dict(pm),
        guide_modality=manifest.get("guide_modality"),
        guide=None if gm is None else GuideMap.from_pairs(tuple(p) for p in gm),
        history=list(manifest.get("history", [])),
        n_sweeps=manifest.get("n_sweeps", 0),
        converged=manifest.get("converged", False),
        train_gamma_bar=(_read_array(root, "train_gamma_bar.bin", files)
                         if "train_gamma_bar.bin" in files else None),
    )
