"""Command-line harness: synth, reconstruct, infer and design experiments.

Configuration is a flat key=value text file; any key can be overridden on
the command line as ``--key value``.  Numeric outputs are CSV files whose
first line is the schema marker ``# schema=1``; images are plain PGM; each
report additionally renders a PNG figure next to the delimited output.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import design as design_mod
from . import imaging, models, solvers, varinf

CSV_SCHEMA = "# schema=1"

DEFAULTS = {
    "image": "synth:phantom",
    "side": "32",
    "seed": "0",
    "sigma2": "auto",
    "sigma2_rel": "1e-3",
    "tau_a": str(models.TAU_A),
    "tau_r": str(models.TAU_R),
    "potential": "laplace",
    "nu": "2.1",
    "grouped_tv": "true",
    "levels": "auto",
    "bounding": "A",
    "variance": "exact",
    "estimator": "map",
    "map_eps": "1e-6",
    "columns": "auto",
    "columns_init": "auto",
    "columns_total": "8",
    "design": "all",
    "rd_repeats": "5",
    "outer_max": "25",
    "outer_tol": "1e-6",
    "out": "out",
}


class Config(dict):
    """Flat string-keyed configuration with typed accessors."""

    def get_int(self, key):
        return int(self[key])

    def get_float(self, key):
        v = float(self[key])
        return v

    def get_bool(self, key):
        v = self[key].strip().lower()
        if v in ("true", "1", "yes", "on"):
            return True
        if v in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key}={self[key]!r} is not a boolean")


def load_config(path=None, overrides=()):
    cfg = Config(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise IOError(f"config file not found: {path}")
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, _, val = line.partition("=")
                key, val = key.strip(), val.strip()
                if key not in DEFAULTS:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                cfg[key] = val
    for key, val in overrides:
        if key not in DEFAULTS:
            raise ValueError(f"unknown config key {key!r}")
        cfg[key] = val
    for key in ("tau_a", "tau_r", "map_eps", "outer_tol", "sigma2_rel"):
        if cfg.get_float(key) <= 0:
            raise ValueError(f"config key {key} must be positive")
    return cfg


def write_csv(path, columns, rows):
    """CSV with the version header; floats printed with 12 significant digits."""

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return format(v, ".12g")
        return str(v)

    with open(path, "w") as fh:
        fh.write(CSV_SCHEMA + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def _figure(path, draw):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0), constrained_layout=True)
    draw(fig, ax)
    fig.savefig(path, dpi=130)
    plt.close(fig)


# ---------------------------------------------------------------------------
# shared model assembly


def _load_image(cfg):
    spec = cfg["image"]
    side = cfg.get_int("side")
    if spec.startswith("synth:"):
        gen = spec.split(":", 1)[1]
        img = _generate(gen, side, cfg.get_int("seed"))
    else:
        if not os.path.exists(spec):
            raise IOError(f"image file not found: {spec}")
        img = imaging.read_pgm(spec)
        side = img.shape[0]
    if img.shape[0] != img.shape[1]:
        raise ValueError("square images are required")
    if img.shape[0] & (img.shape[0] - 1):
        raise ValueError("image side must be a power of two")
    return img


def _generate(gen, side, seed):
    if gen == "phantom":
        return imaging.synth_phantom(side, seed=seed)
    if gen in ("smoothedges", "smooth+edges"):
        return imaging.synth_smooth_edges(side, seed=seed)
    raise ValueError(f"unknown synthetic generator {gen!r}")


def _sigma2(cfg, u_true):
    if cfg["sigma2"] == "auto":
        return cfg.get_float("sigma2_rel") * float(np.mean(u_true ** 2))
    v = float(cfg["sigma2"])
    if v <= 0:
        raise ValueError("sigma2 must be positive")
    return v


def _op_kwargs(cfg):
    kw = dict(
        tau_a=cfg.get_float("tau_a"),
        tau_r=cfg.get_float("tau_r"),
        grouped_tv=cfg.get_bool("grouped_tv"),
        potential=cfg["potential"],
    )
    if cfg["potential"] == "student_t":
        kw["nu"] = cfg.get_float("nu")
    if cfg["levels"] != "auto":
        kw["levels"] = cfg.get_int("levels")
    return kw


def _parse_columns(cfg, width):
    spec = cfg["columns"]
    if spec == "all":
        return list(range(width))
    if spec == "none":
        return []
    if spec == "auto":
        init = _init_columns(cfg, width)
        extra = cfg.get_int("columns_total") - len(init)
        if extra < 0:
            raise ValueError("columns_total smaller than the initial design")
        return sorted(init + design_mod.baseline_design(
            "lowpass", width, extra, init=init))
    return sorted(int(c) for c in spec.split(","))


def _init_columns(cfg, width):
    spec = cfg["columns_init"]
    if spec == "auto":
        lo = (width - 1) // 2
        return [lo, lo + 1]
    return sorted(int(c) for c in spec.split(","))


def _build_model(cfg, columns, seed=None):
    img = _load_image(cfg)
    seed = cfg.get_int("seed") if seed is None else seed
    u_scaled = img.ravel() / 255.0
    sigma2 = _sigma2(cfg, u_scaled)
    model, u_true = models.simulate_image_model(
        img, columns, seed=seed, sigma2=sigma2, **_op_kwargs(cfg)
    )
    return model, u_true


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    gen = cfg["image"].split(":", 1)[1] if cfg["image"].startswith("synth:") else "phantom"
    side, seed = cfg.get_int("side"), cfg.get_int("seed")
    img = _generate(gen, side, seed)
    path = os.path.join(out, f"{gen}_{side}_seed{seed}.pgm")
    imaging.write_pgm(path, img)

    def draw(fig, ax):
        ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        ax.set_title(f"{gen} side={side} seed={seed}")
        ax.axis("off")

    _figure(path.replace(".pgm", ".png"), draw)
    print(path)
    return path


def cmd_reconstruct(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    img = _load_image(cfg)
    side = img.shape[0]
    columns = _parse_columns(cfg, side)
    model, u_true = _build_model(cfg, columns)

    estimator = cfg["estimator"]
    if estimator == "map":
        u_hat, _ = solvers.map_estimate(model, epsilon_smooth=cfg.get_float("map_eps"))
    elif estimator == "mean":
        state = varinf.run_double_loop(
            model,
            bounding=cfg["bounding"],
            variance_source=varinf.VarianceSource.parse(cfg["variance"],
                                                        seed=cfg.get_int("seed")),
            outer_max=cfg.get_int("outer_max"),
            outer_tol=cfg.get_float("outer_tol"),
        )
        u_hat = state.u_star
    else:
        raise ValueError(f"unknown estimator {estimator!r}")

    err = float(np.linalg.norm(u_hat - u_true))
    u_zf = model.X.adjoint(model.y)
    err_zf = float(np.linalg.norm(u_zf - u_true))

    recon = np.clip(u_hat.reshape(side, side) * 255.0, 0, 255)
    recon_path = os.path.join(out, "recon.pgm")
    imaging.write_pgm(recon_path, recon)
    write_csv(
        os.path.join(out, "reconstruct.csv"),
        ["estimator", "n_columns", "m", "recon_error", "zerofill_error"],
        [(estimator, len(columns), model.m, err, err_zf)],
    )

    def draw(fig, ax):
        ax.axis("off")
        for i, (title, data) in enumerate(
            [("truth", u_true), ("recon", u_hat), ("zero-fill", u_zf)]
        ):
            sub = fig.add_subplot(1, 3, i + 1)
            sub.imshow(data.reshape(side, side), cmap="gray", vmin=0, vmax=1)
            sub.set_title(title, fontsize=9)
            sub.axis("off")
        fig.suptitle(f"error {err:.4f} (zero-fill {err_zf:.4f})", fontsize=10)

    _figure(os.path.join(out, "reconstruct.png"), draw)
    print(f"recon_error={err:.6g} zerofill_error={err_zf:.6g} -> {recon_path}")
    return err


def cmd_infer(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    img = _load_image(cfg)
    side = img.shape[0]
    columns = _parse_columns(cfg, side)
    model, _ = _build_model(cfg, columns)
    boundings = ["A", "B"] if cfg["bounding"] == "AB" else [cfg["bounding"]]

    rows = []
    curves = {}
    for bnd in boundings:
        state = varinf.run_double_loop(
            model,
            bounding=bnd,
            variance_source=varinf.VarianceSource.parse(cfg["variance"],
                                                        seed=cfg.get_int("seed")),
            outer_max=cfg.get_int("outer_max"),
            outer_tol=cfg.get_float("outer_tol"),
        )
        curves[bnd] = [p for _, p in state.phi_history]
        history = [(t, p) for t, p in state.phi_history if t >= 1]
        for (t, phi), steps, gstats in zip(
            history, state.inner_newton_steps, state.gamma_stats
        ):
            rows.append((bnd, t, phi, steps) + gstats)
    csv_path = os.path.join(out, "infer.csv")
    write_csv(
        csv_path,
        ["bounding", "outer", "phi", "inner_newton_steps", "gamma_min",
         "gamma_median", "gamma_max"],
        rows,
    )

    def draw(fig, ax):
        for bnd, phis in curves.items():
            ax.plot(range(1, len(phis) + 1), phis, marker="o", label=f"type {bnd}")
        ax.set_xlabel("outer loop")
        ax.set_ylabel("criterion")
        ax.legend()

    _figure(os.path.join(out, "infer_phi.png"), draw)
    print(csv_path)
    return csv_path


def cmd_design(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    img = _load_image(cfg)
    side = img.shape[0]
    seed = cfg.get_int("seed")
    u_scaled = img.ravel() / 255.0
    sigma2 = _sigma2(cfg, u_scaled)
    kw = _op_kwargs(cfg)
    problem = models.ImageDesignProblem(
        side=side, sigma2=sigma2, tau_a=kw["tau_a"], tau_r=kw["tau_r"],
        grouped_tv=kw["grouped_tv"], potential=kw["potential"],
        nu=kw.get("nu"),
    )
    init = _init_columns(cfg, side)
    total = cfg.get_int("columns_total")
    rounds = total - len(init)
    if rounds < 0:
        raise ValueError("columns_total smaller than the initial design")
    pool = [c for c in range(side) if c not in init]

    # the initial measurements are shared by every design kind
    rng = np.random.default_rng(seed)
    sigma = float(np.sqrt(sigma2))
    y_init = {}
    for c in init:
        op = problem.column_operator(c)
        y_init[c] = op.forward(u_scaled) + sigma * rng.standard_normal(op.rows)

    kinds = ["op", "ct", "eq", "rd"] if cfg["design"] == "all" else [cfg["design"]]
    rd_repeats = cfg.get_int("rd_repeats")
    seeds = np.random.SeedSequence(seed).spawn(3 + rd_repeats)
    map_eps = cfg.get_float("map_eps")
    trajectories = {}

    for kind in kinds:
        if kind == "op":
            traj = design_mod.run_sequential_design(
                problem, u_scaled, pool, init, rounds,
                variance_source=varinf.VarianceSource.parse(
                    cfg["variance"], seed=seed),
                seed=seeds[0],
                bounding=cfg["bounding"] if cfg["bounding"] != "AB" else "A",
                y_init=y_init, map_eps=map_eps, kind="op",
                fit_options={"outer_max": cfg.get_int("outer_max"),
                             "outer_tol": cfg.get_float("outer_tol")},
            )
            trajectories["op"] = [traj]
        elif kind in ("ct", "eq"):
            name = "lowpass" if kind == "ct" else "equispaced"
            order = design_mod.baseline_design(name, side, rounds, init=init)
            traj = design_mod.run_fixed_design(
                problem, u_scaled, order, init,
                seed=seeds[1 if kind == "ct" else 2],
                map_eps=map_eps, kind=kind, y_init=y_init,
            )
            trajectories[kind] = [traj]
        elif kind == "rd":
            reps = []
            for j in range(rd_repeats):
                order = design_mod.baseline_design(
                    "random_vd", side, rounds, init=init, seed=seed + 1000 + j
                )
                reps.append(
                    design_mod.run_fixed_design(
                        problem, u_scaled, order, init,
                        seed=seeds[3 + j],
                        map_eps=map_eps, kind=f"rd{j}", y_init=y_init,
                    )
                )
            trajectories["rd"] = reps
        else:
            raise ValueError(f"unknown design kind {kind!r}")

    columns_hdr = ["round", "selected", "score", "phi", "recon_error",
                   "wall_time_s"]
    for kind, trajs in trajectories.items():
        for traj in trajs:
            suffix = traj.kind if kind == "rd" else kind
            write_csv(os.path.join(out, f"design_{suffix}.csv"), columns_hdr,
                      traj.rows())
            model = problem.model(traj.final_columns, traj.final_y)
            u_map, _ = solvers.map_estimate(model, epsilon_smooth=map_eps)
            imaging.write_pgm(
                os.path.join(out, f"recon_{suffix}.pgm"),
                np.clip(u_map.reshape(side, side) * 255.0, 0, 255),
            )

    def draw(fig, ax):
        for kind, trajs in trajectories.items():
            errs = np.mean([t.errors for t in trajs], axis=0)
            ax.plot(range(len(errs)), errs, marker="o", label=kind)
        ax.set_xlabel("round")
        ax.set_ylabel("reconstruction error")
        ax.legend()

    _figure(os.path.join(out, "design_error.png"), draw)
    summary = {
        kind: float(np.mean([t.errors[-1] for t in trajs]))
        for kind, trajs in trajectories.items()
    }
    print(" ".join(f"{k}={v:.6g}" for k, v in sorted(summary.items())))
    return summary


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="slm",
        description="Sparse linear model inference, reconstruction and design",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("reconstruct", "infer", "design", "synth"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--bounding", choices=["A", "B", "AB"], default=None)
        p.add_argument("--variance", default=None)
        p.add_argument("--design", choices=["op", "ct", "eq", "rd", "all"],
                       default=None)
        p.add_argument("--generator", default=None,
                       help="synthetic image family (synth command)")
        p.add_argument("--side", type=int, default=None)
    args, extra = parser.parse_known_args(argv)

    overrides = []
    for flag in ("seed", "out", "bounding", "variance", "design", "side"):
        val = getattr(args, flag)
        if val is not None:
            overrides.append((flag, str(val)))
    if args.generator is not None:
        overrides.append(("image", f"synth:{args.generator}"))
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise SystemExit(f"unexpected argument {tok!r}")
        try:
            val = next(it)
        except StopIteration:
            raise SystemExit(f"missing value for {tok}")
        overrides.append((tok[2:], val))

    cfg = load_config(args.config, overrides)
    command = {
        "synth": cmd_synth,
        "reconstruct": cmd_reconstruct,
        "infer": cmd_infer,
        "design": cmd_design,
    }[args.command]
    command(cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
