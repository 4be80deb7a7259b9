"""Batch front end: config-driven pipeline stages with text-file persistence.

Usage: occ <stage> --config <file> [key=value ...]
Stages: css, swibra, hopf, cps, floquet, path, skiba, value.
Config files are flat key=value lines with dotted keys ('#' comments);
command-line key=value pairs override file entries. Unknown keys are
rejected. Relative output paths are placed under $OCC_OUT_DIR when set.
Exit codes: 0 ok, 2 config error, 3 solver error, 4 saddle-point violation.
"""

import argparse
import os
import sys

import numpy as np

from . import io as occio
from .cpath import CpSettings, isc
from .errors import (
    DegenerateOrbitError,
    DomainError,
    FormatError,
    InvalidArgumentError,
    NoConvergenceError,
    NoSkibaError,
    OccError,
    SaddlePointError,
)
from .fem1d import assemble_operators, build_mesh, ode_operators
from .models import get_model, pollution_flat_css, sloc_flat_seed
from .periodic import cps_continue, cps_refine, cps_switch, cps_target, \
    cps_value, floquet
from .skiba import skiba_bisect, skiba_scan
from .steady import (
    _make_point,
    continue_css,
    corrected_branch_switch,
    css_target,
    detect_bifurcations,
    newton_css,
)
from .value import css_value, path_diagnostics, path_value


class ConfigError(Exception):
    pass


_GLOBAL_KEYS = {"model", "mesh.lx", "mesh.nx"}
_GLOBAL_PREFIXES = ("param.", "in.", "out.")
_STAGE_KEYS = {
    "css": {"css.param", "css.ds", "css.steps", "css.dsmax", "css.seed",
            "css.tol"},
    "swibra": {"swibra.event", "swibra.amplitude"},
    "hopf": {"hopf.event", "hopf.amplitude", "hopf.mesh"},
    "cps": {"cps.param", "cps.ds", "cps.steps", "cps.dsmax", "cps.at",
            "cps.sheet_amplitude"},
    "floquet": {"floquet.m"},
    "path": {"path.v0", "path.alvin", "path.arcsteps", "path.anchor",
             "cp.nti", "cp.T", "cp.nTp", "cp.freeT", "cp.eps_inf", "cp.eps2",
             "cp.msw", "cp.sig", "cp.sigmin", "cp.sigmax", "cp.xi",
             "cp.retsw", "cp.tol", "cp.max_newton"},
    "skiba": {"path.v0", "path.alvin", "path.arcsteps", "cp.nti", "cp.T",
              "cp.eps_inf", "cp.eps2", "cp.sig", "cp.tol", "skiba.value_tol",
              "skiba.alpha_tol"},
    "value": {"value.phase"},
}


def parse_config(fname, overrides):
    cfg = {}
    if fname:
        try:
            with open(fname) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}")
        for ln in lines:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            if "=" not in ln:
                raise ConfigError(f"malformed config line: {ln!r}")
            k, v = ln.split("=", 1)
            cfg[k.strip()] = v.strip()
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"malformed override: {ov!r}")
        k, v = ov.split("=", 1)
        cfg[k.strip()] = v.strip()
    return cfg


def validate_keys(stage, cfg):
    allowed = _GLOBAL_KEYS | _STAGE_KEYS[stage]
    for k in cfg:
        if k in allowed or k.startswith(_GLOBAL_PREFIXES):
            continue
        raise ConfigError(f"unknown config key {k!r} for stage {stage!r}")


def _resolve_out(path):
    root = os.environ.get("OCC_OUT_DIR", "")
    if root and not os.path.isabs(path):
        os.makedirs(root, exist_ok=True)
        return os.path.join(root, path)
    return path


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"missing config key {key!r}")
    return cfg[key]


def _build_problem(cfg):
    model = get_model(_require(cfg, "model"))
    overrides = {k[len("param."):]: float(v) for k, v in cfg.items()
                 if k.startswith("param.")}
    params = model.default_params(**overrides)
    if model.is_pde:
        lx = float(cfg.get("mesh.lx", np.pi / 2))
        nx = int(cfg.get("mesh.nx", 20))
        fem = assemble_operators(build_mesh(lx, nx))
    else:
        fem = ode_operators()
    return model, fem, params


def _settings_from(cfg):
    kw = {}
    for key, cast in [("nti", int), ("nTp", int), ("freeT", lambda s: bool(int(s))),
                      ("eps_inf", float), ("eps2", float), ("msw", int),
                      ("sig", float), ("sigmin", float), ("sigmax", float),
                      ("xi", float), ("retsw", int), ("tol", float),
                      ("T", float), ("max_newton", int)]:
        ck = f"cp.{key}"
        if ck in cfg:
            kw[key] = cast(cfg[ck])
    return CpSettings(**kw)


def _seed_state(cfg, model, fem, params):
    if "in.point" in cfg:
        data = occio.load_point(cfg["in.point"])
        return data["u"], data["params"]
    seed = cfg.get("css.seed", "")
    if model.name in ("pollution", "pollution-ode"):
        return pollution_flat_css(params, n=fem.n), params
    if model.name == "sloc":
        sel = seed if seed in ("FSC", "FSM") else "FSC"
        return np.repeat(sloc_flat_seed(params, sel), fem.n), params
    raise ConfigError(f"no steady seed available for model {model.name!r}")


def _load_target(cfg, model, fem):
    if "in.point" in cfg:
        data = occio.load_point(cfg["in.point"])
        return css_target(model, fem, data["u"], data["params"])
    if "in.orbit" in cfg:
        data = occio.load_orbit(cfg["in.orbit"])
        anchor = int(cfg.get("path.anchor", 0))
        return cps_target(model, fem, data["orbit"], anchor_index=anchor)
    raise ConfigError("target not found: set in.point or in.orbit")


def _v0_from(cfg, model, fem):
    if "in.v0point" in cfg:
        data = occio.load_point(cfg["in.v0point"])
        return data["u"][: model.nstates * fem.n]
    spec = _require(cfg, "path.v0")
    vals = [float(tok) for tok in spec.split(",")]
    if len(vals) != model.nstates:
        raise ConfigError(
            f"path.v0 needs {model.nstates} per-state constants")
    return np.repeat(np.array(vals), fem.n)


def _alvin_from(cfg):
    spec = cfg.get("path.alvin", "0.25,0.5,0.75,1.0")
    return [float(tok) for tok in spec.split(",")]


# ----------------------------------------------------------------------
# stages


def stage_css(cfg):
    model, fem, params = _build_problem(cfg)
    u0, params = _seed_state(cfg, model, fem, params)
    u0 = newton_css(model, fem, u0, params)
    pname = _require(cfg, "css.param")
    ds = float(cfg.get("css.ds", 0.02))
    steps = int(cfg.get("css.steps", 20))
    ds_max = float(cfg["css.dsmax"]) if "css.dsmax" in cfg else None
    tol = float(cfg.get("css.tol", 1e-8))
    start = _make_point(model, fem, u0, params, 0.0)
    branch = continue_css(model, fem, start, pname, ds, steps, tol=tol,
                          ds_max=ds_max)
    for bp in branch.points:
        print(f"css {pname}={bp.params[pname]:.6f} n_neg={bp.n_neg} "
              f"J_ca={bp.j_ca:.6f}")
    events = detect_bifurcations(model, fem, branch)
    for k, ev in enumerate(events):
        print(f"event {k}: kind={ev.kind} {pname}={ev.param_value:.6f} "
              f"mode={ev.spatial_mode} omega={ev.omega:.6f}")
    if "out.branch" in cfg:
        occio.save_branch(_resolve_out(cfg["out.branch"]), model.name, branch,
                          fem.n, model.nstates)
    if "out.bd" in cfg:
        occio.emit_branch_csv(_resolve_out(cfg["out.bd"]), branch)
    if branch.failed:
        raise NoConvergenceError("continuation abandoned below minimal step")


def _events_of_branch(cfg, model, fem):
    data = occio.load_branch(_require(cfg, "in.branch"))
    branch = data["branch"]
    return branch, detect_bifurcations(model, fem, branch)


def stage_swibra(cfg):
    model, fem, _ = _build_problem(cfg)
    _, events = _events_of_branch(cfg, model, fem)
    idx = int(cfg.get("swibra.event", 0))
    if not 0 <= idx < len(events):
        raise ConfigError(f"event index {idx} out of range ({len(events)})")
    amp = float(cfg.get("swibra.amplitude", 0.1))
    u, params = corrected_branch_switch(model, fem, events[idx], amp)
    print(f"swibra: landed at {events[idx].param_name}="
          f"{params[events[idx].param_name]:.6f}")
    if "out.point" in cfg:
        occio.save_point(_resolve_out(cfg["out.point"]), model.name, params,
                         u, fem.n, model.nstates)


def stage_hopf(cfg):
    model, fem, _ = _build_problem(cfg)
    _, events = _events_of_branch(cfg, model, fem)
    hopf = [e for e in events if e.kind == "hopf"]
    idx = int(cfg.get("hopf.event", 0))
    if not 0 <= idx < len(hopf):
        raise ConfigError(f"hopf event index {idx} out of range ({len(hopf)})")
    amp = float(cfg.get("hopf.amplitude", 0.02))
    mesh = int(cfg.get("hopf.mesh", 61))
    orbit = cps_switch(model, fem, hopf[idx], amp, m_mesh=mesh)
    print(f"hopf: orbit at {hopf[idx].param_name}="
          f"{orbit.params[hopf[idx].param_name]:.6f} Tp={orbit.T_p:.6f} "
          f"amp={orbit.amplitude():.6f}")
    if "out.orbit" in cfg:
        occio.save_orbit(_resolve_out(cfg["out.orbit"]), model.name, orbit,
                         fem.n, model.nstates)


def stage_cps(cfg):
    model, fem, _ = _build_problem(cfg)
    data = occio.load_orbit(_require(cfg, "in.orbit"))
    orbit = data["orbit"]
    pname = _require(cfg, "cps.param")
    ds = float(cfg.get("cps.ds", 0.05))
    steps = int(cfg.get("cps.steps", 20))
    ds_max = float(cfg["cps.dsmax"]) if "cps.dsmax" in cfg else None
    orbits, info = cps_continue(model, fem, orbit, pname, ds, steps,
                                ds_max=ds_max)
    for o in orbits:
        print(f"cps {pname}={o.params[pname]:.6f} Tp={o.T_p:.6f} "
              f"amp={o.amplitude():.6f}")
    for f in info["folds"]:
        print(f"fold near {pname}={f:.6f}")
    final = orbits[-1]
    if "cps.at" in cfg:
        # re-anchor at an exact parameter value, preferring a requested sheet
        target_p = float(cfg["cps.at"])
        min_amp = float(cfg.get("cps.sheet_amplitude", 0.0))
        cands = [o for o in orbits if o.amplitude() >= min_amp]
        near = min(cands, key=lambda o: abs(o.params[pname] - target_p))
        from .periodic import CpsOrbit, cps_newton

        guess = CpsOrbit(t_mesh=near.t_mesh, u=near.u.copy(), T_p=near.T_p,
                         params=near.params.updated(**{pname: target_p}))
        final = cps_newton(model, fem, guess)
        print(f"anchored at {pname}={target_p:.6f} Tp={final.T_p:.6f} "
              f"amp={final.amplitude():.6f}")
    if info["failed"]:
        print("cps continuation stopped early (minimal stepsize)")
    if "out.orbit" in cfg:
        occio.save_orbit(_resolve_out(cfg["out.orbit"]), model.name, final,
                         fem.n, model.nstates)


def stage_floquet(cfg):
    model, fem, _ = _build_problem(cfg)
    data = occio.load_orbit(_require(cfg, "in.orbit"))
    orbit = data["orbit"]
    m_ref = int(cfg.get("floquet.m", orbit.m))
    if m_ref != orbit.m:
        orbit = cps_refine(model, fem, orbit, m_ref)
    fl = floquet(model, fem, orbit)
    triv = float(np.min(np.abs(np.exp(np.clip(fl.log_abs, -50, 50)) - 1)))
    print(f"floquet: {fl.multipliers.size} multipliers, trivial deviation "
          f"{triv:.3e}")
    for k, g in enumerate(fl.multipliers[:6]):
        print(f"  gamma[{k}] = {g.real:.6e} {g.imag:+.6e}j |.|="
              f"{np.exp(fl.log_abs[k]):.6e}")
    if "out.multipliers" in cfg:
        occio.emit_multipliers_csv(_resolve_out(cfg["out.multipliers"]),
                                   fl.multipliers)


def stage_path(cfg):
    model, fem, _ = _build_problem(cfg)
    target = _load_target(cfg, model, fem)
    v0 = _v0_from(cfg, model, fem)
    alvin = _alvin_from(cfg)
    n_arc = int(cfg.get("path.arcsteps", 0))
    settings = _settings_from(cfg)
    path, hist = isc(model, fem, target, v0, alvin, n_arc=n_arc,
                     settings=settings)
    for a, J, T in zip(hist.alphas, hist.values, hist.Ts):
        print(f"path alpha={min(a, 1.0):.4f} J={J:.6f} T={T:.4f}")
    if hist.stalled:
        print("path continuation stalled before alpha=1")
        if not hist.alphas:
            raise NoConvergenceError("no homotopy step converged")
    if "out.path" in cfg:
        occio.save_path(_resolve_out(cfg["out.path"]), model.name, path,
                        fem.n, model.nstates)
    if "out.diagnostics" in cfg:
        from .cpath import target_state

        diag = path_diagnostics(model, fem, path, target_state(target))
        occio.emit_diagnostics_csv(_resolve_out(cfg["out.diagnostics"]), diag)
    if "out.heatmap" in cfg:
        nodes = fem.mesh.nodes if fem.mesh is not None else np.zeros(1)
        occio.emit_path_heatmap_csv(_resolve_out(cfg["out.heatmap"]), path,
                                    nodes, model.nstates)
    if "out.series" in cfg:
        # one time-series file per field component
        base = cfg["out.series"]
        for c in range(2 * model.nstates):
            occio.emit_path_series_csv(
                _resolve_out(base.replace("%d", str(c))), path, c,
                model.nstates, fem.n)


def stage_skiba(cfg):
    model, fem, _ = _build_problem(cfg)
    dataA = occio.load_point(_require(cfg, "in.pointA"))
    dataB = occio.load_point(_require(cfg, "in.pointB"))
    target_A = css_target(model, fem, dataA["u"], dataA["params"])
    target_B = css_target(model, fem, dataB["u"], dataB["params"])
    v0 = _v0_from(cfg, model, fem)
    alvin = _alvin_from(cfg)
    settings = _settings_from(cfg)
    from dataclasses import replace

    settings = replace(settings, retsw=1)
    _, hist = isc(model, fem, target_A, v0, alvin,
                  n_arc=int(cfg.get("path.arcsteps", 0)), settings=settings)
    scan = skiba_scan(model, fem, hist, target_B, settings=settings)
    for a, JA, JB in scan:
        print(f"scan alpha={min(a, 1.0):.4f} J_A={JA:.6f} J_B={JB:.6f}")
    if "out.scan" in cfg:
        occio.emit_skiba_csv(_resolve_out(cfg["out.scan"]), scan)
    res = skiba_bisect(model, fem, hist, target_A, target_B, scan,
                       value_tol=float(cfg.get("skiba.value_tol", 1e-4)),
                       alpha_tol=float(cfg.get("skiba.alpha_tol", 1e-3)),
                       settings=settings)
    print(f"skiba alpha*={res.alpha_star:.4f} J_A={res.J_A:.6f} "
          f"J_B={res.J_B:.6f}")


def stage_value(cfg):
    model, fem, _ = _build_problem(cfg)
    if "in.path" in cfg:
        data = occio.load_path(cfg["in.path"])
        J = path_value(model, fem, data["path"])
        print(f"value J={J!r}")
    elif "in.point" in cfg:
        data = occio.load_point(cfg["in.point"])
        J = css_value(model, fem, data["u"], data["params"])
        print(f"value J={J!r}")
    elif "in.orbit" in cfg:
        data = occio.load_orbit(cfg["in.orbit"])
        phase = float(cfg.get("value.phase", 0.0))
        J = cps_value(model, fem, data["orbit"], phase=phase)
        print(f"value J={J!r}")
    else:
        raise ConfigError("value stage needs in.path, in.point, or in.orbit")


_STAGES = {
    "css": stage_css,
    "swibra": stage_swibra,
    "hopf": stage_hopf,
    "cps": stage_cps,
    "floquet": stage_floquet,
    "path": stage_path,
    "skiba": stage_skiba,
    "value": stage_value,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="occ",
        description="optimal-control continuation pipeline",
    )
    parser.add_argument("stage", choices=sorted(_STAGES))
    parser.add_argument("--config", default=None)
    args, overrides = parser.parse_known_args(argv)
    try:
        for ov in overrides:
            if "=" not in ov or ov.startswith("-"):
                raise ConfigError(f"unexpected argument {ov!r}")
        cfg = parse_config(args.config, overrides)
        validate_keys(args.stage, cfg)
        _STAGES[args.stage](cfg)
    except (ConfigError, FormatError, InvalidArgumentError) as exc:
        print(f"occ: config error: {exc}", file=sys.stderr)
        return 2
    except SaddlePointError as exc:
        print(f"occ: saddle-point violation: {exc}", file=sys.stderr)
        return 4
    except (NoConvergenceError, DegenerateOrbitError, NoSkibaError,
            DomainError, OccError) as exc:
        print(f"occ: solver error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
