"""Design files: a JSON record of the offline synthesis.

Floats are written with ``repr`` (the ``json`` default), which round-trips
IEEE doubles exactly, so a loaded design is bit-identical to the saved one.
"""
from __future__ import annotations

import json

import numpy as np

from .chain import BenchConfig, format_config, parse_config
from .contraction import ContractionDesign, TightenedMargins

FORMAT = "rfmpc-design"
VERSION = 1


def _mat(a):
    return np.asarray(a, dtype=float).tolist()


def design_to_dict(design: ContractionDesign, margins: TightenedMargins, cfg: BenchConfig | None = None) -> dict:
    out = {
        "format": FORMAT,
        "version": VERSION,
        "K": _mat(design.K),
        "beta": float(design.beta),
        "Z": _mat(design.Z),
        "r": float(design.r),
        "alpha": float(design.alpha),
        "sigma": float(design.sigma),
        "trace_Z": design.trace,
        "kappa_hat": None if design.kappa_hat is None else float(design.kappa_hat),
        "c_hat": _mat(margins.c_hat),
        "d_hat": _mat(margins.d_hat),
    }
    if cfg is not None:
        out["config"] = format_config(cfg)
    return out


def design_from_dict(d: dict):
    """Inverse of :func:`design_to_dict`; returns ``(design, margins, cfg_or_None)``."""
    if d.get("format") != FORMAT:
        raise ValueError("not a design file")
    if d.get("version") != VERSION:
        raise ValueError(f"unsupported design file version {d.get('version')!r}")
    design = ContractionDesign(
        K=np.array(d["K"], dtype=float),
        beta=float(d["beta"]),
        Z=np.array(d["Z"], dtype=float),
        r=float(d["r"]),
        alpha=float(d["alpha"]),
        sigma=float(d["sigma"]),
        kappa_hat=d.get("kappa_hat"),
    )
    margins = TightenedMargins(np.array(d["c_hat"], dtype=float), np.array(d["d_hat"], dtype=float))
    cfg = parse_config(d["config"]) if "config" in d else None
    return design, margins, cfg


def save_design(path, design, margins, cfg=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(design_to_dict(design, margins, cfg), fh, indent=1)
        fh.write("\n")


def load_design(path):
    with open(path, encoding="utf-8") as fh:
        return design_from_dict(json.load(fh))
