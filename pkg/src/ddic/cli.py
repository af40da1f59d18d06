"""Command-line entry point: preprocess, train, translate, evaluate, phantom-gen.

Settings come from a YAML file (``--config``). Command-line flags override
file values, which override built-in defaults. Every command writes a
``manifest.json`` into its output directory holding the resolved
configuration, the seed, the package version and SHA-256 hashes of inputs,
checkpoints and outputs. Manifests carry no timestamps, so identical reruns
produce identical manifests.

Exit codes: 0 success, 1 data or processing failure, 2 invalid
configuration or refused overwrite.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .data import (
    PreprocessConfig,
    filter_by_hc,
    load_dataset,
    preprocess,
    read_image,
    split_dataset,
    write_image16,
)
from .denoiser import NetworkDenoiser, TrainConfig, load_checkpoint, smooth, train_denoiser
from .errors import ConfigurationError, DataError, DdicError
from .metrics import DownsampleFeatures, HistogramSpec, RoiSpec, cnr, compare_groups, fid, mutual_information, psnr
from .phantom import PhantomSpec, generate_phantom_pair
from .schedule import cosine_schedule
from .translate import DdicConfig, translate_ddib, translate_ddic
from .unet import PRESETS, UNetConfig


EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
MAX_LEVEL = 65535


# ------------------------------------------------------------------ config


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleSection(_Section):
    T: int = Field(1000, ge=1)
    s: float = Field(0.008, gt=0)
    max_beta: float = Field(0.999, gt=0, lt=1)


class ArchSection(_Section):
    preset: Literal["toy", "small", "base"] | None = "small"
    base_channels: int | None = Field(None, ge=1)
    channel_mults: list[int] | None = None
    num_res_blocks: int | None = Field(None, ge=1)
    time_dim: int | None = Field(None, ge=2)
    groups: int = Field(8, ge=1)

    def build(self, image_size: int) -> UNetConfig:
        base = dict(PRESETS[self.preset]) if self.preset else {}
        for key in ("base_channels", "channel_mults", "num_res_blocks", "time_dim"):
            value = getattr(self, key)
            if value is not None:
                base[key] = tuple(value) if key == "channel_mults" else value
        missing = {"base_channels", "channel_mults", "num_res_blocks", "time_dim"} - set(base)
        if missing:
            raise ConfigurationError(f"architecture is missing {sorted(missing)} (set a preset or give them)")
        return UNetConfig(image_size=image_size, groups=self.groups, **base)


class PreprocessSection(_Section):
    input: Path
    size: int = Field(128, ge=1)
    pixel_size: float = Field(1.094, gt=0)
    masking: bool = True
    value_range: tuple[float, float] = (-1.0, 1.0)
    hc_range: tuple[float, float] | None = (170.0, 350.0)
    train_fraction: float = Field(0.9, gt=0, lt=1)


class TrainSection(_Section):
    data: Path
    members: Path | None = None  # optional list of file names to use
    schedule: ScheduleSection = ScheduleSection()
    arch: ArchSection = ArchSection()
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(2e-4, gt=0)
    checkpoint_every: int = Field(500, ge=1)
    warmup: int = Field(100, ge=0)
    hflip: bool = False
    ema_decay: float | None = Field(None, gt=0, lt=1)
    grad_clip: float | None = Field(1.0, gt=0)


class TranslateSection(_Section):
    input: Path
    source_checkpoint: Path
    target_checkpoint: Path
    method: Literal["ddib", "ddic"] = "ddic"
    lr: float = Field(3.0, ge=0)
    median_kernel: int = 3
    normalize_grad: bool = False
    clip_x0: bool = True
    batch_size: int = Field(8, ge=1)

    @field_validator("median_kernel")
    @classmethod
    def _odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("median_kernel must be a positive odd integer")
        return v


class EvaluateSection(_Section):
    source: Path
    methods: dict[str, Path]
    rois: Path | None = None
    bins: int = Field(64, ge=2)
    fid_size: int = Field(8, ge=1)
    fid_eps: float = Field(1e-6, ge=0)
    plots: bool = True

    @model_validator(mode="after")
    def _nonempty(self):
        if not self.methods:
            raise ValueError("evaluate.methods must name at least one method directory")
        return self


class PhantomSetSection(_Section):
    start: int = Field(0, ge=0)
    count: int = Field(0, ge=0)


class PhantomSection(_Section):
    size: int = Field(32, ge=16)
    speckle: float = Field(0.5, ge=0)
    noise_floor: float = Field(0.04, ge=0)
    shadow_strength: float = Field(0.65, ge=0, le=1)
    smoothness: float = Field(0.6, ge=0)
    train_a: PhantomSetSection = PhantomSetSection(start=0, count=600)
    train_b: PhantomSetSection = PhantomSetSection(start=1000, count=600)
    test: PhantomSetSection = PhantomSetSection(start=5000, count=30)


class RunConfig(_Section):
    seed: int = 0
    out: Path | None = None
    jobs: int = Field(1, ge=1)
    preprocess: PreprocessSection | None = None
    train: TrainSection | None = None
    translate: TranslateSection | None = None
    evaluate: EvaluateSection | None = None
    phantom: PhantomSection | None = None


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    base = path.parent
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return _resolve_paths(cfg, base)


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    """Interpret relative paths in the file against the file's directory."""

    def fix(model):
        if model is None:
            return
        for name, value in model:
            if isinstance(value, Path) and not value.is_absolute():
                setattr(model, name, base / value)
            elif isinstance(value, dict):
                setattr(model, name, {k: (base / v if isinstance(v, Path) and not v.is_absolute() else v)
                                      for k, v in value.items()})

    for section in (cfg, cfg.preprocess, cfg.train, cfg.translate, cfg.evaluate):
        fix(section)
    return cfg


def _jsonable(obj):
    if isinstance(obj, BaseModel):
        return _jsonable(obj.model_dump())
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


# --------------------------------------------------------------- file utils


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(paths, relative_to: Path | None = None) -> dict[str, str]:
    def key(p: Path) -> str:
        return str(p.relative_to(relative_to)) if relative_to is not None else str(p)

    return {key(Path(p)): sha256(Path(p)) for p in sorted(map(str, paths))}


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def prepare_out(out: Path, force: bool, owned=("images", "traces", "plots", "checkpoints")) -> None:
    """Refuse to touch a non-empty output directory unless forced; when forced, clear what we own."""
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
        for name in owned:
            if (out / name).is_dir():
                shutil.rmtree(out / name)
    out.mkdir(parents=True, exist_ok=True)


def read_image_set(path: Path) -> tuple[list[str], list[np.ndarray], tuple[float, float]]:
    """Load a directory of PNGs as float arrays in their declared intensity range.

    ``path`` may be a set written by this tool (``images/`` plus
    ``manifest.json`` with an ``intensity_mapping``) or a bare directory of
    8/16-bit images, which is mapped from the full integer scale onto [-1, 1].
    """
    path = Path(path)
    img_dir = path / "images" if (path / "images").is_dir() else path
    if not img_dir.is_dir():
        raise DataError(f"image directory not found: {img_dir}")
    value_range = (-1.0, 1.0)
    manifest = path / "manifest.json"
    if manifest.is_file():
        mapping = json.loads(manifest.read_text()).get("intensity_mapping")
        if mapping:
            value_range = tuple(float(v) for v in mapping["value_range"])
    names = sorted(p.name for p in img_dir.iterdir() if p.suffix.lower() == ".png")
    if not names:
        raise DataError(f"no .png images in {img_dir}")
    lo, hi = value_range
    images = []
    for name in names:
        raw = read_image(img_dir / name)
        full = 255.0 if raw.dtype == np.uint8 else float(MAX_LEVEL)
        images.append(lo + raw.astype(np.float64) / full * (hi - lo))
    return names, images, value_range


def write_image_set(out: Path, names, images, value_range) -> list[Path]:
    paths = []
    for name, img in zip(names, images):
        p = out / "images" / name
        write_image16(p, img, value_range)
        paths.append(p)
    return paths


def _mapping(value_range) -> dict:
    lo, hi = value_range
    return {"value_range": [lo, hi], "levels": MAX_LEVEL, "formula": "value = lo + level / levels * (hi - lo)"}


def _manifest(command: str, cfg: RunConfig, section, inputs=(), checkpoints=(), outputs=(), extra=None) -> dict:
    out = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": section,
        "inputs": _hash_tree(inputs),
        "checkpoints": _hash_tree(checkpoints),
        "outputs": _hash_tree(outputs, cfg.out),
    }
    if extra:
        out.update(extra)
    return out


# ----------------------------------------------------------------- commands


def _preprocess_one(args):
    item, pcfg = args
    try:
        return item.name, preprocess(item, pcfg), None
    except DdicError as exc:
        return item.name, None, str(exc)


def cmd_preprocess(cfg: RunConfig, out: Path, force: bool) -> int:
    sec = cfg.preprocess
    if sec is None:
        raise ConfigurationError("config has no 'preprocess' section")
    items = load_dataset(sec.input)
    excluded = missing = 0
    if sec.hc_range is not None:
        kept, missing = filter_by_hc(items, *sec.hc_range)
        excluded = len(items) - len(kept) - missing
        items = kept
    pcfg = PreprocessConfig(size=sec.size, pixel_size=sec.pixel_size, masking=sec.masking,
                            value_range=tuple(sec.value_range))
    prepare_out(out, force)
    jobs = [(item, pcfg) for item in items]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_preprocess_one, jobs))
    else:
        results = [_preprocess_one(j) for j in jobs]
    failures = {name: err for name, _, err in results if err is not None}
    good = [(name, img) for name, img, err in results if err is None]
    outputs = write_image_set(out, [n for n, _ in good], [i for _, i in good], pcfg.value_range)
    train, test = split_dataset([n for n, _ in good], sec.train_fraction, seed=cfg.seed)
    (out / "train.txt").write_text("".join(f"{n}\n" for n in sorted(train)))
    (out / "test.txt").write_text("".join(f"{n}\n" for n in sorted(test)))
    inputs = [Path(sec.input) / "images" / it.name for it in items] + [Path(sec.input) / "annotations.csv"]
    _write_json(out / "manifest.json", _manifest(
        "preprocess", cfg, sec, inputs=inputs, outputs=outputs + [out / "train.txt", out / "test.txt"],
        extra={"intensity_mapping": _mapping(pcfg.value_range),
               "hc_filter": {"range": sec.hc_range, "excluded": excluded, "missing_hc": missing},
               "split": {"train": len(train), "test": len(test)},
               "failures": failures}))
    for name, err in sorted(failures.items()):
        print(f"error: {name}: {err}", file=sys.stderr)
    print(f"preprocessed {len(good)} of {len(items)} images into {out}")
    return EXIT_FAILURE if failures else EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, force: bool, resume: bool) -> int:
    sec = cfg.train
    if sec is None:
        raise ConfigurationError("config has no 'train' section")
    schedule = cosine_schedule(sec.schedule.T, sec.schedule.s, sec.schedule.max_beta)
    names, images, value_range = read_image_set(sec.data)
    if sec.members is not None:
        wanted = [ln.strip() for ln in Path(sec.members).read_text().splitlines() if ln.strip()]
        absent = sorted(set(wanted) - set(names))
        if absent:
            raise DataError(f"members not found in {sec.data}: {', '.join(absent)}")
        keep = set(wanted)
        names, images = zip(*[(n, im) for n, im in zip(names, images) if n in keep])
    arch = sec.arch.build(images[0].shape[-1])
    tcfg = TrainConfig(batch_size=sec.batch_size, lr=sec.lr, steps=sec.steps, seed=cfg.seed,
                       checkpoint_every=sec.checkpoint_every, hflip=sec.hflip, ema_decay=sec.ema_decay,
                       grad_clip=sec.grad_clip, warmup=sec.warmup)
    ckpt_dir = out / "checkpoints"
    resume_from = None
    if resume:
        resume_from = ckpt_dir / "last.pt"
        if not resume_from.is_file():
            raise DataError(f"nothing to resume: {resume_from} does not exist")
    else:
        prepare_out(out, force)
    result = train_denoiser(np.stack(images).astype(np.float32), schedule, tcfg, arch, value_range=value_range,
                            out_dir=ckpt_dir, resume_from=resume_from)
    model = out / "model.pt"
    result.denoiser.save(model)
    losses = result.losses
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "smoothed"])
        for i, (v, s) in enumerate(zip(losses, smooth(losses) if losses else [])):
            w.writerow([i + 1, repr(v), repr(float(s))])
    data_dir = Path(sec.data) / "images" if (Path(sec.data) / "images").is_dir() else Path(sec.data)
    _write_json(out / "manifest.json", _manifest(
        "train", cfg, sec, inputs=[data_dir / n for n in names], checkpoints=[model],
        outputs=[out / "losses.csv"],
        extra={"architecture": arch.to_dict(), "schedule": schedule.params(), "parameters":
               result.denoiser.num_parameters, "steps": len(losses)}))
    if losses:
        s = smooth(losses)
        print(f"trained {len(losses)} steps; smoothed loss {s[min(49, len(s) - 1)]:.4f} -> {s[-1]:.4f}")
    return EXIT_OK


def _translate_chunk(args):
    """Translate one fixed chunk in a single-threaded torch context."""
    chunk, src_path, dst_path, method, dcfg = args
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        src = NetworkDenoiser.load(src_path)
        dst = NetworkDenoiser.load(dst_path)
        x = torch.from_numpy(np.stack(chunk).astype(np.float32))
        if method == "ddib":
            with torch.no_grad():
                return translate_ddib(x, src, dst, clip_x0=dcfg.clip_x0).numpy(), None
        res = translate_ddic(x, src, dst, dcfg)
        traces = [[step.for_image(i) for step in res.trace] for i in range(x.shape[0])]
        return res.output.detach().numpy(), traces
    finally:
        torch.set_num_threads(prev)


def cmd_translate(cfg: RunConfig, out: Path, force: bool) -> int:
    sec = cfg.translate
    if sec is None:
        raise ConfigurationError("config has no 'translate' section")
    src_meta = load_checkpoint(sec.source_checkpoint)
    dst_meta = load_checkpoint(sec.target_checkpoint)
    if src_meta["schedule"] != dst_meta["schedule"]:
        raise ConfigurationError(f"checkpoint schedules differ: {src_meta['schedule']} vs {dst_meta['schedule']}")
    if src_meta["normalization"] != dst_meta["normalization"]:
        raise ConfigurationError("checkpoint intensity normalizations differ")
    value_range = tuple(src_meta["normalization"]["value_range"])
    names, images, in_range = read_image_set(sec.input)
    if tuple(in_range) != value_range:
        lo, hi = in_range
        a, b = value_range
        images = [(im - lo) * ((b - a) / (hi - lo)) + a for im in images]
    dcfg = DdicConfig(lr=sec.lr, median_kernel=sec.median_kernel, normalize_grad=sec.normalize_grad,
                      clip_x0=sec.clip_x0)
    prepare_out(out, force)
    bs = sec.batch_size
    chunks = [images[i:i + bs] for i in range(0, len(images), bs)]
    args = [(c, str(sec.source_checkpoint), str(sec.target_checkpoint), sec.method, dcfg) for c in chunks]
    if cfg.jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(min(cfg.jobs, len(chunks))) as pool:
            results = list(pool.map(_translate_chunk, args))
    else:
        results = [_translate_chunk(a) for a in args]
    outputs = np.concatenate([r[0] for r in results])
    paths = write_image_set(out, names, outputs, value_range)
    if sec.method == "ddic":
        traces = [t for r in results for t in r[1]]
        for name, trace in zip(names, traces):
            p = out / "traces" / (Path(name).stem + ".jsonl")
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text("".join(json.dumps(_jsonable(rec), sort_keys=True) + "\n" for rec in trace))
            paths.append(p)
    in_dir = Path(sec.input) / "images" if (Path(sec.input) / "images").is_dir() else Path(sec.input)
    _write_json(out / "manifest.json", _manifest(
        "translate", cfg, sec, inputs=[in_dir / n for n in names],
        checkpoints=[sec.source_checkpoint, sec.target_checkpoint], outputs=paths,
        extra={"intensity_mapping": _mapping(value_range), "schedule": src_meta["schedule"],
               "ddic": dcfg.__dict__ if sec.method == "ddic" else None}))
    print(f"translated {len(names)} images with {sec.method} into {out}")
    return EXIT_OK


def load_rois(path: Path) -> dict[str, RoiSpec]:
    raw = json.loads(Path(path).read_text())
    return {name: RoiSpec(tuple(r["roi"]), tuple(r["background"])) for name, r in raw.items()}


def cmd_evaluate(cfg: RunConfig, out: Path, force: bool) -> int:
    sec = cfg.evaluate
    if sec is None:
        raise ConfigurationError("config has no 'evaluate' section")
    src_names, src_imgs, src_range = read_image_set(sec.source)
    sets = {}
    problems = []
    for method, path in sec.methods.items():
        names, imgs, rng = read_image_set(path)
        if names != src_names:
            only_src = sorted(set(src_names) - set(names))
            only_m = sorted(set(names) - set(src_names))
            problems.append(f"{method}: missing {only_src or '[]'}; unexpected {only_m or '[]'}")
        sets[method] = (imgs, rng)
    if problems:
        for p in problems:
            print(f"error: file lists differ from source: {p}", file=sys.stderr)
        return EXIT_FAILURE
    rois = load_rois(sec.rois) if sec.rois is not None else {}
    hist = HistogramSpec(bins=sec.bins)
    prepare_out(out, force)

    rows = []
    per_method: dict[str, dict[str, list[float]]] = {}
    for i, name in enumerate(src_names):
        src = src_imgs[i]
        roi = rois.get(name)
        src_cnr = cnr(src, roi) if roi else float("nan")
        for method, (imgs, rng) in sets.items():
            img = imgs[i]
            row = {
                "name": name,
                "method": method,
                "mi": mutual_information(src, img, hist),
                "psnr": psnr(src, img, src_range) if tuple(rng) == tuple(src_range) else _psnr_mixed(src, src_range,
                                                                                                    img, rng),
                "cnr_source": src_cnr,
                "cnr_output": cnr(img, roi) if roi else float("nan"),
            }
            rows.append(row)
            cols = per_method.setdefault(method, {"mi": [], "psnr": [], "cnr_output": []})
            for key in cols:
                cols[key].append(row[key])
    per_method["source"] = {"cnr_output": [cnr(src_imgs[i], rois[n]) if n in rois else float("nan")
                                           for i, n in enumerate(src_names)]}

    with open(out / "per_image.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["name", "method", "mi", "psnr", "cnr_source", "cnr_output"])
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})

    fx = DownsampleFeatures(sec.fid_size)
    fids = {}
    for method, (imgs, _) in sets.items():
        try:
            fids[method] = fid(src_imgs, imgs, fx, eps=sec.fid_eps)
        except DdicError as exc:
            fids[method] = f"unavailable: {exc}"

    summary = {}
    for method, cols in per_method.items():
        summary[method] = {}
        for metric, values in cols.items():
            arr = np.asarray(values, dtype=np.float64)
            fin = arr[np.isfinite(arr)]
            summary[method][metric] = {
                "n": int(arr.size), "n_finite": int(fin.size),
                "mean": float(fin.mean()) if fin.size else None,
                "std": float(fin.std(ddof=1)) if fin.size > 1 else None,
            }
    comparisons = _comparisons(per_method)
    _write_json(out / "summary.json", {"methods": list(sec.methods), "n_images": len(src_names),
                                       "summary": summary, "fid": fids, "comparisons": comparisons})
    outputs = [out / "per_image.csv", out / "summary.json"]
    if sec.plots:
        outputs += _plots(out / "plots", per_method)
    inputs = []
    for path in [sec.source, *sec.methods.values()]:
        d = Path(path) / "images" if (Path(path) / "images").is_dir() else Path(path)
        inputs += [d / n for n in src_names]
    if sec.rois is not None:
        inputs.append(sec.rois)
    _write_json(out / "manifest.json", _manifest("evaluate", cfg, sec, inputs=inputs, outputs=outputs))
    print(f"evaluated {len(src_names)} images x {len(sets)} methods into {out}")
    return EXIT_OK


def _psnr_mixed(src, src_range, img, rng):
    lo, hi = rng
    a, b = src_range
    return psnr(src, (img - lo) * ((b - a) / (hi - lo)) + a, src_range)


def _comparisons(per_method) -> list[dict]:
    """Welch tests between every pair of groups for every shared metric.

    Non-finite values (identical images give infinite PSNR) are dropped and counted.
    """
    out = []
    methods = list(per_method)
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            for metric in sorted(set(per_method[a]) & set(per_method[b])):
                va = np.asarray(per_method[a][metric], dtype=np.float64)
                vb = np.asarray(per_method[b][metric], dtype=np.float64)
                rec = {"a": a, "b": b, "metric": metric,
                       "dropped_nonfinite": int((~np.isfinite(va)).sum() + (~np.isfinite(vb)).sum())}
                va, vb = va[np.isfinite(va)], vb[np.isfinite(vb)]
                try:
                    r = compare_groups(va, vb)
                    rec.update(t=r.t, p=r.p, df=r.df)
                except DdicError as exc:
                    rec.update(t=None, p=None, df=None, note=str(exc))
                out.append(rec)
    return out


def _plots(plot_dir: Path, per_method) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    metrics = sorted({m for cols in per_method.values() for m in cols})
    paths = []
    for metric in metrics:
        labels, data = [], []
        for method, cols in per_method.items():
            arr = np.asarray(cols.get(metric, []), dtype=np.float64)
            arr = arr[np.isfinite(arr)]
            if arr.size:
                labels.append(method)
                data.append(arr)
        if not data:
            continue
        fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(data), 3.2))
        ax.boxplot(data)
        ax.set_xticks(range(1, len(labels) + 1), labels)
        ax.set_ylabel(metric)
        fig.tight_layout()
        p = plot_dir / f"{metric}.png"
        fig.savefig(p, dpi=80, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    return paths


def cmd_phantom_gen(cfg: RunConfig, out: Path, force: bool) -> int:
    sec = cfg.phantom or PhantomSection()
    spec = PhantomSpec(size=sec.size, speckle=sec.speckle, noise_floor=sec.noise_floor,
                       shadow_strength=sec.shadow_strength, smoothness=sec.smoothness, seed=cfg.seed)
    prepare_out(out, force, owned=("train_a", "train_b", "test_a", "test_b"))
    value_range = (-1.0, 1.0)  # phantoms live in [0, 1]; stored rescaled to the model range
    outputs = []
    rois = {}
    geometry = {}
    for subset, part, which in (("train_a", sec.train_a, 0), ("train_b", sec.train_b, 1),
                                ("test_a", sec.test, 0), ("test_b", sec.test, 1)):
        names, imgs = [], []
        for idx in range(part.start, part.start + part.count):
            pair = generate_phantom_pair(spec, idx)
            name = f"phantom_{idx:06d}.png"
            names.append(name)
            imgs.append(pair[which] * 2.0 - 1.0)
            if subset == "test_a":
                g = pair[2]
                rois[name] = {"roi": list(g.roi), "background": list(g.background)}
                geometry[name] = g.record()
        paths = write_image_set(out / subset, names, imgs, value_range)
        _write_json(out / subset / "manifest.json", {"intensity_mapping": _mapping(value_range),
                                                     "phantom": spec.to_dict(), "domain": "ab"[which]})
        outputs += paths
    _write_json(out / "rois.json", rois)
    _write_json(out / "geometry.json", geometry)
    outputs += [out / "rois.json", out / "geometry.json"]
    _write_json(out / "manifest.json", _manifest("phantom-gen", cfg, sec, outputs=outputs,
                                                 extra={"phantom": spec.to_dict()}))
    print(f"wrote phantom sets into {out}")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddic", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("preprocess", "train", "translate", "evaluate", "phantom-gen"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--jobs", type=int, help="parallel workers; never changes results")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/last.pt")
        if name == "translate":
            p.add_argument("--method", choices=("ddib", "ddic"))
            p.add_argument("--lr", type=float, help="DDIC latent step size")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigurationError("--jobs must be >= 1")
            cfg.jobs = args.jobs
        if args.out is not None:
            cfg.out = args.out
        if cfg.out is None:
            raise ConfigurationError("no output directory: set 'out' in the config or pass --out")
        if args.command == "translate" and cfg.translate is not None:
            if args.method is not None:
                cfg.translate.method = args.method
            if args.lr is not None:
                if args.lr < 0:
                    raise ConfigurationError("--lr must be >= 0")
                cfg.translate.lr = args.lr
        out = Path(cfg.out)
        if args.command == "preprocess":
            return cmd_preprocess(cfg, out, args.force)
        if args.command == "train":
            return cmd_train(cfg, out, args.force, args.resume)
        if args.command == "translate":
            return cmd_translate(cfg, out, args.force)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.force)
        return cmd_phantom_gen(cfg, out, args.force)
    except (ConfigurationError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DdicError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
