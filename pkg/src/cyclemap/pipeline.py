"""Command implementations behind the CLI.

Each ``cmd_*`` function does the work of one subcommand and returns a
process exit code (0 on success); anything fatal is raised as a package
error and mapped to an exit code by the CLI layer. The functions take
plain values rather than parsed argument objects so they are directly
usable from tests and scripts.
"""

import dataclasses
import hashlib
import time
from pathlib import Path

import numpy as np

from .cache import ShapeCache, load_cache, save_cache
from .decimate import decimate
from .descriptor import multiscale_shot
from .errors import CacheError, CheckpointError, ConfigError, CycleMapError
from .fmap import (
    SoftCorrespondence,
    hard_assignment,
    load_point_map,
    save_matrix,
    save_point_map,
)
from .geodesy import (
    PointMap,
    cumulative_curve,
    distance_matrix,
    fps_sample,
    geodesic_error,
)
from .meshio import load_mesh, save_mesh
from .model import forward_pair
from .spectral import cotan_laplacian, eigenbasis
from . import synth
from .trainer import TrainConfig, load_checkpoint, train

MESH_EXTENSIONS = (".off", ".obj", ".ply")

PREPROCESS_DEFAULTS = {
    "target_n": 0,
    "k": 70,
    "scales": 5,
    "lo": 0.2,
    "hi": 2.0,
    "bins": 11,
    "width": 352,
    "radius_fraction": 0.05,
    "dist_samples": 0,
}

GROUPS = ("mesh", "spectral", "descriptor", "distance")


def _fingerprints(source_sha, o):
    return {
        "mesh": {"source_sha": source_sha, "target_n": o["target_n"]},
        "spectral": {"k": o["k"]},
        "descriptor": {"scales": o["scales"], "lo": o["lo"], "hi": o["hi"],
                       "bins": o["bins"], "width": o["width"],
                       "radius_fraction": o["radius_fraction"]},
        "distance": {"samples": o["dist_samples"]},
    }


def preprocess_shape(src_path, cache_path, options, log=print):
    """Bring one shape's cache up to date, rebuilding only stale groups.

    Returns a report dict with the per-group action taken. Sections whose
    fingerprints still match are carried over, so their payload bytes in
    the rewritten file are identical to the old ones.
    """
    o = dict(PREPROCESS_DEFAULTS)
    o.update(options or {})
    t0 = time.perf_counter()
    raw = Path(src_path).read_bytes()
    sha = hashlib.sha256(raw).hexdigest()
    want = _fingerprints(sha, o)

    old = None
    if Path(cache_path).exists():
        try:
            old = load_cache(cache_path)
        except CacheError as exc:
            log(f"warning: {exc}; rebuilding from scratch")
    valid = {g: False for g in GROUPS}
    if old is not None:
        have = old.fingerprints
        valid["mesh"] = have.get("mesh") == want["mesh"]
        for group in GROUPS[1:]:
            valid[group] = valid["mesh"] and have.get(group) == want[group]

    report = {"source": str(src_path), "cache": str(cache_path),
              "actions": {g: ("kept" if valid[g] else "rebuilt")
                          for g in GROUPS}}
    if all(valid.values()):
        report["skipped"] = True
        report["n"] = old.mesh.n_vertices
        report["n_source"] = len(old.vertex_map)
        report["seconds"] = time.perf_counter() - t0
        return report
    report["skipped"] = False

    if valid["mesh"]:
        mesh, vertex_map = old.mesh, old.vertex_map
        n_source = len(old.vertex_map)
    else:
        source = load_mesh(src_path)
        n_source = source.n_vertices
        if 0 < o["target_n"] < source.n_vertices:
            mesh, vertex_map = decimate(source, o["target_n"])
        else:
            mesh, vertex_map = source, np.arange(source.n_vertices)

    basis = (old.basis if valid["spectral"]
             else eigenbasis(cotan_laplacian(mesh), o["k"]))
    stack = (old.stack if valid["descriptor"]
             else multiscale_shot(mesh, m=o["scales"], lo=o["lo"],
                                  hi=o["hi"],
                                  radius_fraction=o["radius_fraction"],
                                  bins=o["bins"], width=o["width"]))
    if valid["distance"]:
        dist = old.dist
    else:
        sample = None
        if o["dist_samples"] > 0:
            sample = fps_sample(mesh, min(o["dist_samples"],
                                          mesh.n_vertices), seed=0)
        dist = distance_matrix(mesh, sample=sample)

    save_cache(ShapeCache(source_sha=sha, mesh=mesh,
                          vertex_map=vertex_map, basis=basis, stack=stack,
                          dist=dist, fingerprints=want), cache_path)
    report["n"] = mesh.n_vertices
    report["n_source"] = n_source
    report["seconds"] = time.perf_counter() - t0
    return report


def _mesh_files(inputs):
    path = Path(inputs)
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in MESH_EXTENSIONS)
        if not files:
            raise ConfigError(f"no mesh files ({'/'.join(MESH_EXTENSIONS)})"
                              f" found in {path}")
        return files
    if path.exists():
        return [path]
    raise ConfigError(f"{path}: no such file or directory")


def cmd_preprocess(inputs, out_dir, options=None, log=print) -> int:
    """Cache every mesh under ``inputs``; 0 if all succeeded, else 2."""
    files = _mesh_files(inputs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    for f in files:
        cache_path = out / (f.stem + ".cysh")
        try:
            rep = preprocess_shape(f, cache_path, options, log=log)
        except CycleMapError as exc:
            failures.append((f, exc))
            log(f"{f.name}: FAILED: {exc}")
            continue
        if rep["skipped"]:
            log(f"{f.name}: up-to-date (n={rep['n']})")
        else:
            acts = " ".join(f"{g}={rep['actions'][g]}" for g in GROUPS)
            log(f"{f.name}: n={rep['n_source']}->{rep['n']} {acts} "
                f"({rep['seconds']:.1f}s)")
    summary = f"{len(files) - len(failures)} of {len(files)} shapes cached"
    if failures:
        summary += f", {len(failures)} failed"
    log(summary)
    return 2 if failures else 0


def _cache_files(cache_src):
    path = Path(cache_src)
    if path.is_dir():
        files = sorted(path.glob("*.cysh"))
        if not files:
            raise ConfigError(f"no .cysh caches found in {path}")
        return files
    if path.exists():
        return [path]
    raise ConfigError(f"{path}: no such file or directory")


def _compatible(caches, paths):
    """All shapes must share every fingerprint except the mesh identity."""
    def comparable(fp):
        out = {g: dict(fp.get(g, {})) for g in GROUPS}
        out["mesh"].pop("source_sha", None)
        return out

    first = comparable(caches[0].fingerprints)
    for cache, path in zip(caches[1:], paths[1:]):
        if comparable(cache.fingerprints) != first:
            raise ConfigError(
                f"cache fingerprints of {paths[0]} and {path} are "
                f"incompatible; re-run preprocessing with one config")


def derive_config(contexts, one_shot=False, overrides=None) -> TrainConfig:
    """TrainConfig with geometry read off the caches.

    ``--one-shot`` raises the step budget to 200 coupling + 800 objective
    unless the caller set epochs explicitly.
    """
    kwargs = {
        "k": contexts[0].basis.eigenfunctions.shape[1],
        "scales": contexts[0].stack.m,
        "width": contexts[0].stack.s,
    }
    if one_shot:
        kwargs.update(one_shot=True, epochs=1000, coupling_epochs=200)
    kwargs.update(overrides or {})
    return TrainConfig(**kwargs)


def _resume_config(resume, one_shot, overrides):
    """Stored config is the baseline on resume; flags override it, but
    the network geometry is frozen by the stored parameter tensors."""
    merged = {f.name: getattr(resume.config, f.name)
              for f in dataclasses.fields(TrainConfig)}
    if one_shot:
        merged["one_shot"] = True
    merged.update(overrides or {})
    config = TrainConfig(**merged)
    for name in ("k", "scales", "width", "blocks"):
        if getattr(config, name) != getattr(resume.config, name):
            raise CheckpointError(
                f"cannot change {name} when resuming (checkpoint was "
                f"trained with {name}={getattr(resume.config, name)})")
    return config


def cmd_train(cache_src, out_checkpoint, *, log_path=None, one_shot=False,
              identity_labels=False, resume_path=None, checkpoint_every=1,
              overrides=None, log=print) -> int:
    """Train over all cached shapes and write checkpoint + loss CSV."""
    paths = _cache_files(cache_src)
    caches = [load_cache(p) for p in paths]
    _compatible(caches, paths)
    contexts = [c.context() for c in caches]

    resume = None
    if resume_path is not None:
        resume = load_checkpoint(resume_path)
        config = _resume_config(resume, one_shot, overrides)
        resume = dataclasses.replace(resume, config=config)
    else:
        config = derive_config(contexts, one_shot, overrides)

    labels = None
    if identity_labels:
        sizes = {ctx.mesh.n_vertices for ctx in contexts}
        if len(sizes) != 1:
            raise ConfigError("identity labels need equal vertex counts, "
                              f"got {sorted(sizes)}")
        n = sizes.pop()
        labels = {(i, j): PointMap(np.arange(n))
                  for i in range(len(contexts))
                  for j in range(len(contexts)) if i != j}

    ckpt, records = train(contexts, config, labels=labels, resume=resume,
                          checkpoint_path=str(out_checkpoint),
                          checkpoint_every=checkpoint_every,
                          log_path=log_path)
    log(f"trained {len(records)} steps over {len(contexts)} shapes")
    if records:
        r = records[-1]
        log(f"final losses: cyclic={r.cyclic:.6g} "
            f"isometric={r.isometric:.6g} coupling={r.coupling:.6g}")
    log(f"checkpoint: {out_checkpoint}")
    if log_path:
        log(f"loss log: {log_path}")
    return 0


def cmd_infer(checkpoint_path, cache_x_path, cache_y_path, out_csv, *,
              soft_path=None, log=print) -> int:
    """Map every source vertex to a target vertex with the trained model."""
    ckpt = load_checkpoint(checkpoint_path)
    cx = load_cache(cache_x_path).context()
    cy = load_cache(cache_y_path).context()
    for name, ctx in (("source", cx), ("target", cy)):
        k = ctx.basis.eigenfunctions.shape[1]
        if (k, ctx.stack.m, ctx.stack.s) != (ckpt.config.k,
                                             ckpt.config.scales,
                                             ckpt.config.width):
            raise CheckpointError(
                f"{name} cache (k={k}, scales={ctx.stack.m}, "
                f"width={ctx.stack.s}) does not match the checkpoint "
                f"(k={ckpt.config.k}, scales={ckpt.config.scales}, "
                f"width={ckpt.config.width})")
    fwd = forward_pair(ckpt.params, cx, cy, reg=ckpt.config.reg)
    pred = hard_assignment(SoftCorrespondence(fwd.P.value))
    save_point_map(out_csv, pred)
    log(f"wrote {out_csv} ({len(pred.assignments)} rows)")
    if soft_path is not None:
        save_matrix(soft_path, fwd.P.value)
        log(f"wrote {soft_path} ({fwd.P.value.shape[0]}x"
            f"{fwd.P.value.shape[1]} float32)")
    return 0


def cmd_eval(map_csv, gt_csv, cache_y_path, out_dir, *,
             max_threshold=0.25, threshold_step=0.0025, log=print) -> int:
    """Score a predicted map against ground truth on the target shape."""
    if threshold_step <= 0 or max_threshold < 0:
        raise ConfigError("thresholds must ascend from 0 with a positive "
                          "step")
    pred = load_point_map(map_csv)
    gt = load_point_map(gt_csv)
    cy = load_cache(cache_y_path)
    err = geodesic_error(pred, gt, cy.dist, area=cy.mesh.total_area)
    thresholds = np.arange(0.0, max_threshold + threshold_step / 2,
                           threshold_step)
    curve = cumulative_curve(err.per_point, thresholds)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "errors.csv", "w", encoding="utf-8") as fh:
        fh.write("vertex,error\n")
        for i, e in enumerate(err.per_point):
            fh.write(f"{i},{repr(float(e))}\n")
    with open(out / "curve.csv", "w", encoding="utf-8") as fh:
        fh.write("threshold,fraction\n")
        for t, frac in zip(thresholds, curve):
            fh.write(f"{repr(float(t))},{repr(float(frac))}\n")
    median = float(np.median(err.per_point))
    log(f"geodesic error (normalized by sqrt target area): "
        f"mean={err.mean:.6g} median={median:.6g} sum={err.total:.6g}")
    log(f"wrote {out / 'errors.csv'} and {out / 'curve.csv'}")
    return 0


def _position_colors(vertices):
    """Per-axis RGB ramp over the bounding box; constant axes stay mid."""
    lo = vertices.min(axis=0)
    span = vertices.max(axis=0) - lo
    t = np.full_like(vertices, 0.5)
    live = span > 1e-12
    t[:, live] = (vertices[:, live] - lo[live]) / span[live]
    return np.clip(np.round(255.0 * t), 0, 255).astype(np.uint8)


def cmd_colorize(cache_x_path, cache_y_path, map_csv, out_source,
                 out_target, log=print) -> int:
    """Export a PLY pair where matched vertices share a color."""
    mx = load_cache(cache_x_path).mesh
    my = load_cache(cache_y_path).mesh
    pred = load_point_map(map_csv)
    if len(pred.assignments) != mx.n_vertices:
        raise ConfigError(f"map has {len(pred.assignments)} rows, source "
                          f"mesh has {mx.n_vertices} vertices")
    if pred.assignments.max() >= my.n_vertices:
        raise ConfigError("map references vertices beyond the target mesh")
    colors_y = _position_colors(my.vertices)
    save_mesh(mx, out_source, colors=colors_y[pred.assignments])
    save_mesh(my, out_target, colors=colors_y)
    log(f"wrote {out_source} and {out_target}")
    return 0


def cmd_synth(kind, out_dir, *, subdivisions=3, bump_amplitude=0.15,
              bend_radius=None, stretch=0.0, seed=0, nx=30, ny=30,
              fmt="ply", log=print) -> int:
    """Generate a deformed shape pair plus its ground-truth map.

    bend_radius=None picks the per-kind default (30.0 for the unit sphere,
    0.8 for the grid); the two live at very different scales.
    """
    if kind == "sphere":
        source, target, gt = synth.sphere_pair(
            subdivisions=subdivisions, bump_amplitude=bump_amplitude,
            bend_radius=30.0 if bend_radius is None else bend_radius,
            stretch_amplitude=stretch, seed=seed)
    elif kind == "grid":
        source, target, gt = synth.grid_pair(
            nx=nx, ny=ny,
            bend_radius=0.8 if bend_radius is None else bend_radius)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected "
                          f"'sphere' or 'grid'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src_path = out / f"source.{fmt}"
    tgt_path = out / f"target.{fmt}"
    gt_path = out / "gt.csv"
    save_mesh(source, src_path)
    save_mesh(target, tgt_path)
    save_point_map(gt_path, PointMap(gt))
    log(f"wrote {src_path}, {tgt_path}, {gt_path} "
        f"({source.n_vertices} vertices)")
    return 0
