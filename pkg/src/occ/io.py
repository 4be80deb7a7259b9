"""Persistence of points, branches, orbits, and paths, plus CSV emitters.

Formats are line-oriented text with a magic/version header and numbers in
full round-trip precision (repr), favoring diffability over compactness.
Readers are fail-closed: version or shape mismatches raise FormatError and
no partial object is ever returned.
"""

import numpy as np

from .cpath import CanonicalPath
from .errors import FormatError
from .models import ModelParams, get_model
from .periodic import CpsOrbit
from .steady import Branch, BranchPoint

_VERSION = 1


def _fmt(x):
    return repr(float(x))


def _fmt_vec(v):
    return " ".join(_fmt(x) for x in np.asarray(v, dtype=float).ravel())


def _parse_vec(text, expect=None):
    try:
        v = np.array([float(tok) for tok in text.split()])
    except ValueError as exc:
        raise FormatError(f"bad numeric field: {exc}")
    if expect is not None and v.size != expect:
        raise FormatError(f"expected {expect} numbers, found {v.size}")
    return v


class _Reader:
    def __init__(self, fname, magic):
        try:
            with open(fname, "r") as fh:
                self.lines = [ln.rstrip("\n") for ln in fh]
        except OSError as exc:
            raise FormatError(f"cannot read {fname}: {exc}")
        self.pos = 0
        head = self.take().split()
        if len(head) != 2 or head[0] != magic:
            raise FormatError(f"{fname}: expected '{magic} <version>' header")
        try:
            version = int(head[1])
        except ValueError:
            raise FormatError(f"{fname}: malformed version field")
        if version > _VERSION:
            raise FormatError(
                f"{fname}: format version {version} newer than supported "
                f"{_VERSION}")

    def take(self, key=None):
        if self.pos >= len(self.lines):
            raise FormatError("unexpected end of file")
        ln = self.lines[self.pos]
        self.pos += 1
        if key is not None:
            if not ln.startswith(key + " ") and ln != key:
                raise FormatError(f"expected field {key!r}, found {ln[:40]!r}")
            return ln[len(key) + 1:]
        return ln


def _write_params(fh, model_name, params):
    fh.write(f"model {model_name}\n")
    fh.write("paramnames " + " ".join(params.names) + "\n")
    fh.write("paramvalues " + _fmt_vec(params.values) + "\n")
    fh.write(f"rhoindex {params.rho_index}\n")


def _read_params(rd):
    model_name = rd.take("model").strip()
    names = tuple(rd.take("paramnames").split())
    values = _parse_vec(rd.take("paramvalues"), expect=len(names))
    try:
        rho_index = int(rd.take("rhoindex"))
    except ValueError:
        raise FormatError("malformed rhoindex")
    params = ModelParams(names=names, values=values, rho_index=rho_index)
    return model_name, params


# ----------------------------------------------------------------------


def save_point(fname, model_name, params, u, n, nstates):
    u = np.asarray(u, dtype=float)
    with open(fname, "w") as fh:
        fh.write(f"occ-point {_VERSION}\n")
        _write_params(fh, model_name, params)
        fh.write(f"shape {n} {nstates}\n")
        fh.write("u " + _fmt_vec(u) + "\n")


def load_point(fname):
    rd = _Reader(fname, "occ-point")
    model_name, params = _read_params(rd)
    n, nstates = _parse_int_pair(rd.take("shape"))
    u = _parse_vec(rd.take("u"), expect=2 * nstates * n)
    return {"model": model_name, "params": params, "u": u, "n": n,
            "nstates": nstates}


def _parse_int_pair(text):
    toks = text.split()
    if len(toks) != 2:
        raise FormatError("expected two integers")
    try:
        return int(toks[0]), int(toks[1])
    except ValueError:
        raise FormatError("malformed integer field")


def save_branch(fname, model_name, branch, n, nstates):
    with open(fname, "w") as fh:
        fh.write(f"occ-branch {_VERSION}\n")
        fh.write(f"model {model_name}\n")
        p0 = branch.points[0].params
        fh.write("paramnames " + " ".join(p0.names) + "\n")
        fh.write(f"rhoindex {p0.rho_index}\n")
        fh.write(f"contparam {branch.param_name}\n")
        fh.write(f"shape {n} {nstates}\n")
        fh.write(f"npoints {len(branch.points)}\n")
        fh.write("folds " + _fmt_vec(branch.folds) + "\n")
        fh.write("events " + " ".join(f"{i},{j}" for i, j in branch.events)
                 + "\n")
        for bp in branch.points:
            fh.write("point " + _fmt(bp.arclength) + " " + str(bp.n_neg)
                     + " " + _fmt(bp.j_ca) + " " + _fmt(bp.tangent_param)
                     + "\n")
            fh.write("pv " + _fmt_vec(bp.params.values) + "\n")
            fh.write("u " + _fmt_vec(bp.u) + "\n")


def load_branch(fname):
    rd = _Reader(fname, "occ-branch")
    model_name = rd.take("model").strip()
    names = tuple(rd.take("paramnames").split())
    try:
        rho_index = int(rd.take("rhoindex"))
    except ValueError:
        raise FormatError("malformed rhoindex")
    param_name = rd.take("contparam").strip()
    n, nstates = _parse_int_pair(rd.take("shape"))
    try:
        npoints = int(rd.take("npoints"))
    except ValueError:
        raise FormatError("malformed npoints")
    folds = list(_parse_vec(rd.take("folds")))
    ev_text = rd.take("events").split()
    events = []
    for tok in ev_text:
        try:
            i, j = tok.split(",")
            events.append((int(i), int(j)))
        except ValueError:
            raise FormatError("malformed events field")
    branch = Branch(param_name=param_name, folds=folds, events=events)
    for _ in range(npoints):
        head = rd.take("point").split()
        if len(head) != 4:
            raise FormatError("malformed point header")
        arclength = float(head[0])
        n_neg = int(head[1])
        j_ca = float(head[2])
        tangent = float(head[3])
        values = _parse_vec(rd.take("pv"), expect=len(names))
        u = _parse_vec(rd.take("u"), expect=2 * nstates * n)
        params = ModelParams(names=names, values=values, rho_index=rho_index)
        tag = "stable" if n_neg == 0 else f"unstable({n_neg})"
        branch.points.append(BranchPoint(u=u, params=params,
                                         arclength=arclength, j_ca=j_ca,
                                         n_neg=n_neg, stability_tag=tag,
                                         tangent_param=tangent))
    return {"model": model_name, "branch": branch, "n": n, "nstates": nstates}


def save_orbit(fname, model_name, orbit, n, nstates):
    with open(fname, "w") as fh:
        fh.write(f"occ-orbit {_VERSION}\n")
        _write_params(fh, model_name, orbit.params)
        fh.write(f"shape {n} {nstates} {orbit.m}\n")
        fh.write("Tp " + _fmt(orbit.T_p) + "\n")
        fh.write("t " + _fmt_vec(orbit.t_mesh) + "\n")
        for row in orbit.u:
            fh.write("row " + _fmt_vec(row) + "\n")


def load_orbit(fname):
    rd = _Reader(fname, "occ-orbit")
    model_name, params = _read_params(rd)
    toks = rd.take("shape").split()
    if len(toks) != 3:
        raise FormatError("expected three shape integers")
    try:
        n, nstates, m = (int(t) for t in toks)
    except ValueError:
        raise FormatError("malformed shape field")
    Tp = float(_parse_vec(rd.take("Tp"), expect=1)[0])
    t = _parse_vec(rd.take("t"), expect=m)
    rows = [_parse_vec(rd.take("row"), expect=2 * nstates * n)
            for _ in range(m)]
    orbit = CpsOrbit(t_mesh=t, u=np.asarray(rows), T_p=Tp, params=params)
    return {"model": model_name, "orbit": orbit, "n": n, "nstates": nstates}


def save_path(fname, model_name, path, n, nstates):
    with open(fname, "w") as fh:
        fh.write(f"occ-path {_VERSION}\n")
        _write_params(fh, model_name, path.params)
        fh.write(f"shape {n} {nstates} {path.m}\n")
        fh.write("T " + _fmt(path.T) + "\n")
        fh.write("alpha " + _fmt(path.alpha) + "\n")
        fh.write(f"kind {path.target_kind}\n")
        fh.write("t " + _fmt_vec(path.t_mesh) + "\n")
        for row in path.u:
            fh.write("row " + _fmt_vec(row) + "\n")


def load_path(fname):
    rd = _Reader(fname, "occ-path")
    model_name, params = _read_params(rd)
    toks = rd.take("shape").split()
    if len(toks) != 3:
        raise FormatError("expected three shape integers")
    try:
        n, nstates, m = (int(t) for t in toks)
    except ValueError:
        raise FormatError("malformed shape field")
    T = float(_parse_vec(rd.take("T"), expect=1)[0])
    alpha = float(_parse_vec(rd.take("alpha"), expect=1)[0])
    kind = rd.take("kind").strip()
    if kind not in ("css", "cps"):
        raise FormatError(f"unknown path kind {kind!r}")
    t = _parse_vec(rd.take("t"), expect=m)
    rows = [_parse_vec(rd.take("row"), expect=2 * nstates * n)
            for _ in range(m)]
    path = CanonicalPath(t_mesh=t, u=np.asarray(rows), T=T, alpha=alpha,
                         target_kind=kind, params=params)
    return {"model": model_name, "path": path, "n": n, "nstates": nstates}


# ----------------------------------------------------------------------
# plot-data CSV emitters


def emit_branch_csv(fname, branch):
    """Bifurcation-diagram data: param, weighted-L2 norm, J_ca, stability."""
    with open(fname, "w") as fh:
        fh.write(f"# occ-branch-bd {_VERSION}\n")
        fh.write("param,unorm,j_ca,n_neg\n")
        for bp in branch.points:
            nrm = float(np.sqrt(np.mean(bp.u**2)))
            fh.write(f"{_fmt(bp.params[branch.param_name])},{_fmt(nrm)},"
                     f"{_fmt(bp.j_ca)},{bp.n_neg}\n")


def emit_path_heatmap_csv(fname, path, nodes, nstates):
    """Space-time field data: t (unscaled), x, component, value."""
    n = len(nodes)
    with open(fname, "w") as fh:
        fh.write(f"# occ-path-heatmap {_VERSION}\n")
        fh.write("t,x,component,value\n")
        for j, tj in enumerate(path.t_mesh):
            F = path.u[j].reshape(2 * nstates, n)
            for c in range(2 * nstates):
                for k in range(n):
                    fh.write(f"{_fmt(tj * path.T)},{_fmt(nodes[k])},{c},"
                             f"{_fmt(F[c, k])}\n")


def emit_path_series_csv(fname, path, component, nstates, n):
    """Single-component time series: t (unscaled), value at every node."""
    with open(fname, "w") as fh:
        fh.write(f"# occ-path-series {_VERSION}\n")
        fh.write("t," + ",".join(f"node{k}" for k in range(n)) + "\n")
        for j, tj in enumerate(path.t_mesh):
            F = path.u[j].reshape(2 * nstates, n)
            fh.write(_fmt(tj * path.T) + ","
                     + ",".join(_fmt(v) for v in F[component]) + "\n")


def emit_diagnostics_csv(fname, diag):
    """Convergence diagnostics: t, deviation, J_ca, discounted J_ca."""
    with open(fname, "w") as fh:
        fh.write(f"# occ-diagnostics {_VERSION}\n")
        fh.write("t,dev,j_ca,j_ca_discounted\n")
        for t, d, a, b in zip(diag.t, diag.dev_t, diag.jca,
                              diag.jca_discounted):
            fh.write(f"{_fmt(t)},{_fmt(d)},{_fmt(a)},{_fmt(b)}\n")


def emit_skiba_csv(fname, scan):
    """Value-crossing data: alpha, J_A, J_B."""
    with open(fname, "w") as fh:
        fh.write(f"# occ-skiba {_VERSION}\n")
        fh.write("alpha,J_A,J_B\n")
        for a, JA, JB in scan:
            fh.write(f"{_fmt(a)},{_fmt(JA)},{_fmt(JB)}\n")


def emit_multipliers_csv(fname, multipliers):
    """Floquet table: index, Re, Im, modulus."""
    with open(fname, "w") as fh:
        fh.write(f"# occ-multipliers {_VERSION}\n")
        fh.write("index,re,im,abs\n")
        for k, g in enumerate(multipliers):
            fh.write(f"{k},{_fmt(g.real)},{_fmt(g.imag)},{_fmt(abs(g))}\n")
