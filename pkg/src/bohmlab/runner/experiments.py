"""Named experiments wired from an ExperimentConfig.

Each experiment computes everything first and returns a list of pending
outputs; ``execute`` then writes them in order through one writer and
finishes with the manifest.
"""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .. import __version__
from .. import io
from ..configspace import EvolutionConfig, Grid, Potential, PsiSource, make_state, potential_from_dict
from ..ensemble import (Ensemble, InitialDensity, equivariance_test, evolve_ensemble, sample_initial,
                        select_max_density_trajectory)
from ..inference import compare_theories, typicality, typicality_agreement_experiment, ZeroMeasureError
from ..perception import (GCBM, SBM, SCBM, SQM, FamilyError, PerceptionSet, build_perception_family,
                          load_perceptions, save_perceptions, scbm_measure_density, set_measure)
from ..pilotwave import NodePolicy, integrate_trajectory, output_grid, path_density_integrals
from .config import ExperimentConfig

# -- builders ----------------------------------------------------------------


def build_grid(d: dict) -> Grid:
    extent = d.get("extent")
    points = d.get("points")
    if extent is None or points is None:
        raise ValueError("grid needs extent and points")
    if isinstance(points, int):
        points = [points] * len(extent)
    return Grid(tuple(tuple(e) for e in extent), tuple(points))


def build_evolution(d: dict) -> EvolutionConfig:
    mass = d.get("mass", 1.0)
    mass = tuple(mass) if isinstance(mass, list) else mass
    return EvolutionConfig(dt=float(d.get("dt", 1e-3)), mass=mass, hbar=float(d.get("hbar", 1.0)))


def build_potential(d: dict) -> Potential:
    return potential_from_dict(d)


def _recipe(spec: dict, potential: dict) -> dict:
    kind = spec.get("kind")
    if kind == "eigenstate":
        return {"kind": "eigenstate", "potential": potential_from_dict(spec.get("potential", potential)),
                "n": spec.get("n", 0)}
    if kind == "superposition":
        terms = []
        for term in spec.get("terms", []):
            c = term.get("coeff", 1.0)
            c = complex(*c) if isinstance(c, list) else complex(c)
            terms.append((c, _recipe(term["state"], potential)))
        return {"kind": "superposition", "terms": terms}
    return dict(spec)


def build_state(d: dict, grid: Grid):
    ev = d["evolution"]
    return make_state(grid, _recipe(d["state"], d["potential"]), ev.get("mass", 1.0), ev.get("hbar", 1.0))


def build_policy(d: dict) -> NodePolicy:
    return NodePolicy(**{k: v for k, v in d.items() if v is not None})


def build_initial_density(spec: dict, grid: Grid, psi0) -> InitialDensity | None:
    """``quantum`` (needs psi0), ``uniform`` over bounds, ``gaussian``, or
    ``tabulated`` values; returns None for quantum when psi0 is None."""
    kind = spec.get("kind", "quantum")
    if kind == "quantum":
        return InitialDensity.quantum(psi0) if psi0 is not None else None
    X = grid.mesh()
    if kind == "uniform":
        bounds = spec.get("bounds") or [list(e) for e in grid.extent]
        vals = np.ones(grid.shape)
        for x, (lo, hi) in zip(X, bounds):
            vals = vals * ((x >= lo) & (x < hi))
    elif kind == "gaussian":
        c = np.broadcast_to(np.asarray(spec.get("center", 0.0), dtype=float), (grid.dims,))
        s = np.broadcast_to(np.asarray(spec.get("width", 1.0), dtype=float), (grid.dims,))
        vals = np.ones(grid.shape)
        for x, ci, si in zip(X, c, s):
            vals = vals * np.exp(-0.5 * ((x - ci) / si) ** 2)
    elif kind == "tabulated":
        vals = np.asarray(spec["values"], dtype=float).reshape(grid.shape)
    else:
        raise ValueError(f"unknown density kind {kind!r}")
    return InitialDensity.custom(grid, vals)


def build_perceptions(spec: dict, grid: Grid, config_path=None, collect=False):
    problems = []
    S = None
    try:
        if "family" in spec:
            S = build_perception_family(spec["family"], grid)
        elif "file" in spec:
            path = Path(spec["file"])
            if not path.is_absolute() and config_path:
                path = Path(config_path).parent / path
            S = load_perceptions(path)
        elif "list" in spec:
            S = PerceptionSet.from_dict({"perceptions": spec["list"]})
        else:
            raise ValueError("perceptions needs one of: family, file, list")
    except FamilyError as err:
        if not collect:
            raise
        problems.append(("perceptions.family", str(err)))
    return (S, problems) if collect else S


# -- run context -------------------------------------------------------------


class Context:
    """Lazily builds the shared objects of one run."""

    def __init__(self, cfg: ExperimentConfig, threads: int = 1, ensemble: Ensemble | None = None):
        self.cfg = cfg
        self.d = cfg.data
        self.threads = threads
        self.grid = build_grid(self.d["grid"])
        self.psi0 = build_state(self.d, self.grid)
        self.potential = build_potential(self.d["potential"])
        self.evcfg = build_evolution(self.d["evolution"])
        self.t_final = float(self.d["evolution"]["t_final"])
        self.source = PsiSource(self.psi0, self.potential, self.evcfg, self.t_final)
        self.policy = build_policy(self.d["integration"]["node_policy"] or {})
        self.rk_dt = float(self.d["integration"]["rk_dt"])
        self.times = output_grid(0.0, self.t_final, float(self.d["integration"]["output_dt"]))
        self._ensemble = ensemble
        self.replayed = ensemble is not None
        self._S = None

    def sample(self, spec: dict, n: int, seed: int, include=()) -> tuple[np.ndarray, str]:
        dens = build_initial_density(spec, self.grid, self.psi0)
        pts = sample_initial(dens, n, seed)
        if include:
            pts = np.concatenate([pts, np.asarray(include, dtype=float).reshape(-1, self.grid.dims)])
        return pts, dens.kind

    def transport(self, pts, seed, kind) -> Ensemble:
        return evolve_ensemble(pts, 0.0, self.t_final, self.source, self.policy, self.rk_dt,
                               output_times=self.times, seed=seed, density_kind=kind, threads=self.threads)

    @property
    def ensemble(self) -> Ensemble:
        if self._ensemble is None:
            e = self.d["ensemble"]
            pts, kind = self.sample(e["density"], e["n"], self.cfg.seed, e.get("include") or [])
            self._ensemble = self.transport(pts, self.cfg.seed, kind)
        return self._ensemble

    @property
    def perceptions(self) -> PerceptionSet:
        if self._S is None:
            self._S = build_perceptions(self.d["perceptions"], self.grid, self.cfg.source_path)
        return self._S

    def theory(self, i: int, spec: dict):
        kind = spec["kind"]
        if kind == "SQM":
            return SQM(self.source)
        if kind == "SBM":
            if "x0" in spec:
                traj = integrate_trajectory(spec["x0"], 0.0, self.t_final, self.source, self.policy,
                                            self.rk_dt, output_times=self.times)
            else:
                traj = self.ensemble.trajectory(int(spec.get("member", 0)))
            th = SBM(traj, self.grid)
            th.tag = spec.get("label", f"SBM[{spec.get('member', 0)}]" if "x0" not in spec else "SBM[x0]")
            return th
        if kind == "SCBM":
            th = SCBM(self.ensemble, self.grid)
            if self.ensemble.density_kind != "quantum":
                th.tag = "GCBM"
        else:
            seed = int(spec.get("seed", self.cfg.seed + 1000 + i))
            pts, dkind = self.sample(spec.get("density") or {"kind": "uniform"}, int(spec.get("n", self.d["ensemble"]["n"])), seed)
            th = GCBM(self.transport(pts, seed, dkind), self.grid)
        th.tag = spec.get("label", th.tag)
        return th

    def theories(self):
        return [(self.theory(i, s), float(s.get("prior", 1.0))) for i, s in enumerate(self.d["theories"])]


# -- experiments -------------------------------------------------------------
# Each returns a list of (filename, kind, payload) to be written later.


def _gnuplot(rows, header):
    lines = ["# " + header]
    for r in rows:
        lines.append("" if r is None else " ".join(repr(float(v)) for v in r))
    return "\n".join(lines) + "\n"


def exp_evolve(ctx: Context):
    out = []
    d = ctx.d
    snap_times = d["snapshots"].get("times") or [0.0, ctx.t_final]
    for i, t in enumerate(snap_times):
        psi = ctx.source.at(float(t))
        out.append((f"psi_{i:03d}.csv", "wavefunction_csv", psi))
        if d["snapshots"].get("binary", True):
            out.append((f"psi_{i:03d}.bin", "wavefunction_bin", psi))
    rows = []
    for t in ctx.times:
        psi = ctx.source.at(float(t))
        rho = np.abs(psi.amplitudes) ** 2 * ctx.grid.cell_volume
        mean = [float(np.sum(rho * x)) for x in ctx.grid.mesh()]
        rows.append([t, psi.norm(), *mean])
    cols = ["t", "norm"] + [f"mean_{a}" for a in "xy"[:ctx.grid.dims]]
    out.append(("norm.csv", "csv", (cols, rows)))
    if d["output"].get("plots") and ctx.grid.dims == 1:
        x = ctx.grid.axis(0)
        dens = [np.abs(ctx.source.at(float(t)).amplitudes) ** 2 for t in snap_times]
        out.append(("density.dat", "text", _gnuplot(zip(x, *dens), "x " + " ".join(f"rho(t={t})" for t in snap_times))))
        if d["output"].get("svg"):
            out.append(("density.svg", "svg", ("density", x, dens, [f"t={t}" for t in snap_times])))
    return out


def exp_trajectories(ctx: Context):
    out, summary = [], []
    trajs = []
    for i, x0 in enumerate(ctx.d["trajectories"]["x0"]):
        tr = integrate_trajectory(x0, 0.0, ctx.t_final, ctx.source, ctx.policy, ctx.rk_dt, output_times=ctx.times)
        trajs.append(tr)
        out.append((f"trajectory_{i:03d}.csv", "trajectory", tr))
        val = path_density_integrals(tr.times, tr.positions[None], ctx.source)[0]
        summary.append({"index": i, "x0": list(map(float, np.atleast_1d(x0))), "path_density_integral": float(val),
                        "x_final": tr.positions[-1].tolist()})
    out.append(("trajectories.json", "json", {"trajectories": summary}))
    if ctx.d["output"].get("plots"):
        rows = []
        for tr in trajs:
            rows.extend([t, *x] for t, x in zip(tr.times, tr.positions))
            rows.append(None)
        out.append(("trajectories.dat", "text", _gnuplot(rows, "t x [y]; one block per trajectory")))
        if ctx.d["output"].get("svg") and ctx.grid.dims == 1:
            out.append(("trajectories.svg", "svg", ("fan", ctx.times, [tr.positions[:, 0] for tr in trajs], None)))
    return out


def _ensemble_outputs(ctx: Context, ens: Ensemble):
    if ctx.replayed:
        return []
    return [("ensemble.csv", "ensemble", ens)]


def exp_equivariance(ctx: Context):
    ens = ctx.ensemble
    times = ctx.d["equivariance"].get("times") or [float(t) for t in ctx.times[1:]] or [0.0]
    rep = equivariance_test(ens, ctx.source, times)
    out = _ensemble_outputs(ctx, ens)
    out.append(("equivariance.json", "json", rep.to_dict()))
    if ctx.d["output"].get("plots"):
        rows = [[t, *row, rep.threshold] for t, row in zip(rep.times, rep.statistics)]
        out.append(("equivariance.dat", "text", _gnuplot(rows, "t D_N[per axis] threshold")))
        if ctx.d["output"].get("svg") and ctx.grid.dims == 1:
            k = min(ens.n, 50)
            out.append(("ensemble.svg", "svg", ("fan", ens.times, [ens.positions[i, :, 0] for i in range(k)], None)))
    return out


def exp_perceptions(ctx: Context):
    S = ctx.perceptions
    theories = ctx.theories() if ctx.d["theories"] else [(SQM(ctx.source), 1.0)]
    rows, measures = [], {}
    for th, _ in theories:
        for p in S:
            if isinstance(th, SCBM):
                m, se = scbm_measure_density(p, th.ensemble, ctx.grid)
            else:
                m, se = th.density(p), 0.0
            rows.append([p.id, th.tag, float(m), float(se)])
        measures[th.tag] = set_measure(S, th)
    out = [("perceptions.yaml", "perceptions", S),
           ("perceptions.csv", "csv", (["id", "theory", "m", "std_error"], rows)),
           ("perceptions.json", "json", {"set_measure": measures, "count": len(S)})]
    return out


def exp_typicality(ctx: Context):
    S = ctx.perceptions
    theories = ctx.theories()
    rows, reports = [], []
    for th, _ in theories:
        try:
            rep = typicality(S, th)
        except ZeroMeasureError as err:
            reports.append({"theory": th.tag, "error": str(err)})
            continue
        reports.append(rep.to_dict())
        rows.extend([pid, th.tag, m, T] for pid, m, T in rep.rows())
    out = [("typicality.csv", "csv", (["id", "theory", "m", "T"], rows)),
           ("typicality.json", "json", {"reports": reports})]
    if any(isinstance(t, SQM) for t, _ in theories) and any(isinstance(t, SCBM) and t.tag == "SCBM" for t, _ in theories):
        ag = ctx.d["agreement"]
        rep = typicality_agreement_experiment(S, ctx.source, ctx.ensemble, int(ag.get("n_sbm", 5)),
                                              int(ag.get("replicates", 2000)), ctx.cfg.seed)
        out.append(("agreement.json", "json", rep.to_dict()))
    return out


def exp_compare(ctx: Context):
    S = ctx.perceptions
    cmp = compare_theories(ctx.d["observed"], S, ctx.theories())
    rows = [[t, p, l, q] for t, p, l, q in zip(cmp.tags, cmp.priors, cmp.likelihoods, cmp.posteriors)]
    return [("comparison.csv", "csv", (["theory", "prior", "likelihood", "posterior"], rows)),
            ("comparison.json", "json", {"observed": ctx.d["observed"], **cmp.to_dict()})]


def exp_select(ctx: Context):
    ens = ctx.ensemble
    values = path_density_integrals(ens.times, ens.positions, ctx.source)
    idx, val = select_max_density_trajectory(ens, ctx.source)
    rows = [[i, *ens.positions[i, 0], values[i]] for i in range(ens.n)]
    cols = ["traj_id"] + [f"{a}0" for a in "xy"[:ctx.grid.dims]] + ["path_density_integral"]
    out = _ensemble_outputs(ctx, ens)
    out += [("path_integrals.csv", "csv", (cols, rows)),
            ("selection.json", "json", {"index": idx, "value": val, "x0": ens.positions[idx, 0].tolist(), "N": ens.n})]
    return out


EXPERIMENT_FUNCS = {
    "evolve": exp_evolve,
    "trajectories": exp_trajectories,
    "equivariance": exp_equivariance,
    "perceptions": exp_perceptions,
    "typicality": exp_typicality,
    "compare": exp_compare,
    "select-trajectory": exp_select,
}


# -- writing -----------------------------------------------------------------


def _svg(path, payload):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "bohmlab"
    kind, x, ys, labels = payload
    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "density":
        for y, lab in zip(ys, labels):
            ax.plot(x, y, label=lab)
        ax.set_xlabel("x")
        ax.set_ylabel("|psi|^2")
        ax.legend()
    else:
        for y in ys:
            ax.plot(x, y, lw=0.7)
        ax.set_xlabel("t")
        ax.set_ylabel("x")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_outputs(outdir: Path, pending, config_hash: str):
    meta = {"config_hash": config_hash}
    files = []
    for name, kind, payload in pending:
        path = outdir / name
        if kind == "wavefunction_csv":
            io.write_wavefunction_csv(payload, path, meta)
        elif kind == "wavefunction_bin":
            io.write_wavefunction_binary(payload, path, config_hash)
        elif kind == "trajectory":
            io.write_trajectory_csv(payload, path, meta)
        elif kind == "ensemble":
            io.write_ensemble(payload, path, outdir / "ensemble.json", meta)
            files.append("ensemble.json")
        elif kind == "csv":
            cols, rows = payload
            io.write_csv(path, cols, rows, meta)
        elif kind == "json":
            io.write_json(path, payload, meta)
        elif kind == "perceptions":
            save_perceptions(payload, path)
            text = path.read_text()
            path.write_text(f"# config_hash: {config_hash}\n" + text)
        elif kind == "text":
            path.write_text(f"# config_hash: {config_hash}\n" + payload)
        elif kind == "svg":
            _svg(path, payload)
            text = path.read_text()
            path.write_text(text.replace("<svg ", f"<!-- config_hash: {config_hash} -->\n<svg ", 1))
        else:
            raise ValueError(f"unknown output kind {kind}")
        files.append(name)
    return files


def execute(cfg: ExperimentConfig, outdir=None, threads: int = 1, ensemble: Ensemble | None = None) -> dict:
    """Run the configured experiment and write outputs plus ``manifest.json``.

    Returns the manifest dict.
    """
    start = time.perf_counter()
    outdir = Path(outdir or cfg.data["output"].get("dir") or f"out/{cfg.data['name']}")
    ctx = Context(cfg, threads=threads, ensemble=ensemble)
    pending = EXPERIMENT_FUNCS[cfg.data["experiment"]](ctx)
    outdir.mkdir(parents=True, exist_ok=True)
    h = cfg.hash
    files = write_outputs(outdir, pending, h)
    manifest = {
        "config_hash": h,
        "tool_version": __version__,
        "experiment": cfg.data["experiment"],
        "seed": cfg.seed,
        "replay": ctx.replayed,
        "wall_time": round(time.perf_counter() - start, 3),
        "files": files + ["manifest.json"],
        "config": cfg.to_dict(),
    }
    io.write_json(outdir / "manifest.json", manifest)
    return manifest
