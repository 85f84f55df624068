"""Problem configuration: JSON schema, validation and built-in presets.

A config is one JSON document (``schema_version`` 1) describing the
system matrices, endpoint moments, cost weights, constraint geometry,
risk budget and run parameters.  ``ProblemConfig`` validates the
document with field-path error messages and builds the in-memory
problem objects from it.  See the README for the documented schema.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .cone_constraints import SecondOrderConeSet
from .dr_ira import IraConfig
from .dynamics import LinearSystemSpec, MomentPair, time_invariant_spec
from .risk import HalfSpace
from .steering import SteeringProblem

__all__ = ["ConfigError", "ProblemConfig", "preset", "PRESET_NAMES"]

SCHEMA_VERSION = 1
PRESET_NAMES = ("double_integrator", "spacecraft_polytope", "spacecraft_cone")


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending field path."""


def _need(mapping, key, path, kind=None):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected an object")
    if key not in mapping:
        raise ConfigError(f"{path}.{key}: missing required field")
    value = mapping[key]
    if kind is not None and not isinstance(value, kind):
        names = kind.__name__ if not isinstance(kind, tuple) else \
            "/".join(k.__name__ for k in kind)
        raise ConfigError(f"{path}.{key}: expected {names}")
    return value


def _matrix(obj, path, rows=None, cols=None):
    try:
        M = np.asarray(obj, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a numeric matrix") from None
    if M.ndim != 2:
        raise ConfigError(f"{path}: expected a 2-d matrix, got shape {M.shape}")
    if rows is not None and M.shape[0] != rows:
        raise ConfigError(f"{path}: expected {rows} rows, got {M.shape[0]}")
    if cols is not None and M.shape[1] != cols:
        raise ConfigError(f"{path}: expected {cols} columns, got {M.shape[1]}")
    return M


def _vector(obj, path, length=None):
    try:
        v = np.asarray(obj, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a numeric vector") from None
    if v.ndim != 1:
        raise ConfigError(f"{path}: expected a flat vector, got shape {v.shape}")
    if length is not None and v.size != length:
        raise ConfigError(f"{path}: expected length {length}, got {v.size}")
    return v


def _matrix_list(obj, path, count):
    """One matrix (replicated) or a list of ``count`` matrices."""
    arr = np.asarray(obj, dtype=float) if not isinstance(obj, dict) else None
    if arr is None:
        raise ConfigError(f"{path}: expected a matrix or list of matrices")
    if arr.ndim == 2:
        return [arr] * count
    if arr.ndim == 3:
        if arr.shape[0] != count:
            raise ConfigError(f"{path}: expected {count} matrices, got {arr.shape[0]}")
        return list(arr)
    raise ConfigError(f"{path}: expected a matrix or list of matrices")


@dataclass(frozen=True)
class ProblemConfig:
    """Validated configuration document."""

    data: dict

    @classmethod
    def from_file(cls, path) -> "ProblemConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
        return cls.validate(data)

    @classmethod
    def validate(cls, data: dict) -> "ProblemConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object at the top level")
        version = _need(data, "schema_version", "config", int)
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"config.schema_version: unsupported version {version}, "
                f"this build reads {SCHEMA_VERSION}")
        cfg = cls(data)
        cfg.to_problem()  # full structural validation
        _ = cfg.ira_config()
        _ = cfg.montecarlo_settings()
        return cfg

    # ---------------- accessors ----------------

    @property
    def name(self) -> str:
        return self.data.get("name", "unnamed")

    @property
    def notes(self) -> list:
        return list(self.data.get("notes", []))

    def digest(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def system_spec(self) -> LinearSystemSpec:
        N = _need(self.data, "horizon", "config", int)
        if N < 1:
            raise ConfigError("config.horizon: must be at least 1")
        dyn = _need(self.data, "dynamics", "config", dict)
        A = _matrix_list(_need(dyn, "A", "config.dynamics"), "config.dynamics.A", N)
        B = _matrix_list(_need(dyn, "B", "config.dynamics"), "config.dynamics.B", N)
        D = _matrix_list(_need(dyn, "D", "config.dynamics"), "config.dynamics.D", N)
        noise = _matrix(_need(self.data, "noise_cov", "config"), "config.noise_cov")
        try:
            return LinearSystemSpec(tuple(A), tuple(B), tuple(D), noise)
        except ValueError as err:
            raise ConfigError(f"config.dynamics: {err}") from None

    def _moments(self, key: str) -> MomentPair:
        section = _need(self.data, key, "config", dict)
        mean = _vector(_need(section, "mean", f"config.{key}"), f"config.{key}.mean")
        cov = _matrix(_need(section, "cov", f"config.{key}"), f"config.{key}.cov",
                      mean.size, mean.size)
        try:
            return MomentPair(mean, cov)
        except ValueError as err:
            raise ConfigError(f"config.{key}: {err}") from None

    def geometry(self, n: int):
        section = _need(self.data, "constraints", "config", dict)
        kind = _need(section, "type", "config.constraints", str)
        if kind == "none":
            return []
        if kind == "polytope":
            rows = _need(section, "halfspaces", "config.constraints", list)
            out = []
            for idx, hs in enumerate(rows):
                path = f"config.constraints.halfspaces[{idx}]"
                normal = _vector(_need(hs, "normal", path), f"{path}.normal", n)
                offset = _need(hs, "offset", path, (int, float))
                try:
                    out.append(HalfSpace(normal, float(offset)))
                except ValueError as err:
                    raise ConfigError(f"{path}: {err}") from None
            return out
        if kind == "cone":
            path = "config.constraints"
            A = _matrix(_need(section, "matrix", path), f"{path}.matrix", None, n)
            b = _vector(_need(section, "matrix_offset", path),
                        f"{path}.matrix_offset", A.shape[0])
            c = _vector(_need(section, "axis", path), f"{path}.axis", n)
            d = _need(section, "axis_offset", path, (int, float))
            try:
                return SecondOrderConeSet(A, b, c, float(d))
            except ValueError as err:
                raise ConfigError(f"{path}: {err}") from None
        raise ConfigError(f"config.constraints.type: unknown type {kind!r}")

    def to_problem(self) -> SteeringProblem:
        spec = self.system_spec()
        init = self._moments("initial")
        terminal = self._moments("terminal")
        cost = _need(self.data, "cost", "config", dict)
        Q = _matrix_list(_need(cost, "state", "config.cost"), "config.cost.state",
                         spec.horizon)
        R = _matrix_list(_need(cost, "control", "config.cost"), "config.cost.control",
                         spec.horizon)
        risk = _need(self.data, "risk", "config", dict)
        total = _need(risk, "total", "config.risk", (int, float))
        mode = risk.get("mode", "dr")
        if mode not in ("dr", "gaussian"):
            raise ConfigError(f"config.risk.mode: expected 'dr' or 'gaussian', got {mode!r}")
        try:
            return SteeringProblem(
                spec=spec, init=init, terminal=terminal,
                state_weight=Q, control_weight=R,
                geometry=self.geometry(spec.state_dim),
                total_risk=float(total), mode=mode,
                causal_feedback=bool(self.data.get("causal_feedback", False)),
            )
        except ValueError as err:
            raise ConfigError(f"config: {err}") from None

    def ira_config(self) -> IraConfig:
        section = self.data.get("ira", {})
        if not isinstance(section, dict):
            raise ConfigError("config.ira: expected an object")
        try:
            return IraConfig(
                rho=float(section.get("rho", 0.7)),
                cost_tol=(None if section.get("cost_tol") is None
                          else float(section["cost_tol"])),
                tol_active=float(section.get("tol_active", 1e-3)),
                max_iters=int(section.get("max_iters", 30)),
            )
        except ValueError as err:
            raise ConfigError(f"config.ira: {err}") from None

    def montecarlo_settings(self) -> dict:
        section = self.data.get("montecarlo", {})
        if not isinstance(section, dict):
            raise ConfigError("config.montecarlo: expected an object")
        family = section.get("family", "laplacian")
        if family not in ("gaussian", "laplacian"):
            raise ConfigError(
                f"config.montecarlo.family: expected 'gaussian' or 'laplacian', "
                f"got {family!r}")
        trials = int(section.get("trials", 500))
        if trials < 1:
            raise ConfigError("config.montecarlo.trials: must be at least 1")
        return {"family": family, "trials": trials,
                "seed": int(section.get("seed", 20270405))}

    def with_overrides(self, **kwargs) -> "ProblemConfig":
        """Copy with CLI-level overrides applied (mode, trials, seed, ira)."""
        data = json.loads(json.dumps(self.data))
        if kwargs.get("mode") is not None:
            data.setdefault("risk", {})["mode"] = kwargs["mode"]
        if kwargs.get("trials") is not None:
            data.setdefault("montecarlo", {})["trials"] = int(kwargs["trials"])
        if kwargs.get("seed") is not None:
            data.setdefault("montecarlo", {})["seed"] = int(kwargs["seed"])
        if kwargs.get("rho") is not None:
            data.setdefault("ira", {})["rho"] = float(kwargs["rho"])
        if kwargs.get("max_iters") is not None:
            data.setdefault("ira", {})["max_iters"] = int(kwargs["max_iters"])
        return ProblemConfig.validate(data)


# ---------------- presets ----------------

def _double_integrator() -> dict:
    dt = 0.2
    A = np.block([[np.eye(2), dt * np.eye(2)],
                  [np.zeros((2, 2)), np.eye(2)]])
    B = np.vstack([dt ** 2 * np.eye(2), dt * np.eye(2)])
    D = 1e-3 * np.eye(4)
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "double_integrator",
        "notes": ["planar double-integrator path planning inside the "
                  "funnel 0.2(x-1) <= y <= -0.2(x-1)"],
        "horizon": 15,
        "dynamics": {"A": A.tolist(), "B": B.tolist(), "D": D.tolist()},
        "noise_cov": np.eye(4).tolist(),
        "initial": {"mean": [-10.0, 1.0, 0.0, 0.0],
                    "cov": np.diag([0.1, 0.1, 0.01, 0.01]).tolist()},
        "terminal": {"mean": [0.0, 0.0, 0.0, 0.0],
                     "cov": (0.25 * np.diag([0.1, 0.1, 0.01, 0.01])).tolist()},
        "cost": {"state": np.diag([10.0, 10.0, 1.0, 1.0]).tolist(),
                 "control": (1e3 * np.eye(2)).tolist()},
        "constraints": {"type": "polytope", "halfspaces": [
            {"normal": [0.2, -1.0, 0.0, 0.0], "offset": 0.2},
            {"normal": [0.2, 1.0, 0.0, 0.0], "offset": 0.2},
        ]},
        "risk": {"total": 0.10, "mode": "dr"},
        "ira": {"rho": 0.7, "tol_active": 1e-3, "max_iters": 30},
        "montecarlo": {"family": "laplacian", "trials": 500, "seed": 20270405},
    }


def _cw_discrete(rate: float, dt: float):
    """Zero-order-hold discretization of the relative-orbit (Hill) dynamics."""
    Ac = np.zeros((6, 6))
    Ac[0:3, 3:6] = np.eye(3)
    Ac[3, 0] = 3.0 * rate ** 2
    Ac[3, 4] = 2.0 * rate
    Ac[4, 3] = -2.0 * rate
    Ac[5, 2] = -rate ** 2
    Bc = np.vstack([np.zeros((3, 3)), np.eye(3)])
    blk = np.zeros((9, 9))
    blk[:6, :6] = Ac
    blk[:6, 6:] = Bc
    E = scipy.linalg.expm(blk * dt)
    return E[:6, :6], E[:6, 6:]


#: mean motion of a 400 km circular orbit, rad/s
_CW_RATE = 0.0011313666536110225
_CW_DT = 1.0
_CW_HORIZON = 15
_CW_NOTE = ("relative-orbit dynamics are an approximate reproduction: "
            "discretized Clohessy-Wiltshire with locally chosen orbital "
            f"rate {_CW_RATE:.6e} rad/s and step {_CW_DT} s; the constraint "
            "geometry is likewise a local default")


def _spacecraft(shift_first_mean: bool) -> dict:
    A, B = _cw_discrete(_CW_RATE, _CW_DT)
    D = 0.02 * np.eye(6)
    mu0 = [100.0, -120.0, 90.0, 0.0, 0.0, 0.0]
    if shift_first_mean:
        mu0[0] = 10.0
    cov0 = 0.4 * np.diag([1.0, 1.0, 1.0, 0.1, 0.1, 0.1])
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "spacecraft_cone" if shift_first_mean else "spacecraft_polytope",
        "notes": [_CW_NOTE],
        "horizon": _CW_HORIZON,
        "dynamics": {"A": A.tolist(), "B": B.tolist(), "D": D.tolist()},
        "noise_cov": np.eye(6).tolist(),
        "initial": {"mean": mu0, "cov": cov0.tolist()},
        "terminal": {"mean": [0.0] * 6, "cov": (0.5 * cov0).tolist()},
        "cost": {"state": np.diag([10.0, 10.0, 10.0, 1.0, 1.0, 1.0]).tolist(),
                 "control": (1e3 * np.eye(3)).tolist()},
        "risk": {"total": 0.15, "mode": "dr"},
        "ira": {"rho": 0.7, "tol_active": 1e-3, "max_iters": 30},
        "montecarlo": {"family": "laplacian", "trials": 500, "seed": 20270405},
    }


def preset(name: str) -> ProblemConfig:
    """Built-in configurations: ``double_integrator``,
    ``spacecraft_polytope`` and ``spacecraft_cone``."""
    if name == "double_integrator":
        return ProblemConfig.validate(_double_integrator())
    if name == "spacecraft_polytope":
        data = _spacecraft(shift_first_mean=False)
        # approach corridor shrinking toward the target along -y
        data["constraints"] = {"type": "polytope", "halfspaces": [
            {"normal": [1.0, 0.9, 0.0, 0.0, 0.0, 0.0], "offset": 2.0},
            {"normal": [-1.0, 0.9, 0.0, 0.0, 0.0, 0.0], "offset": 2.0},
            {"normal": [0.0, 0.9, 1.0, 0.0, 0.0, 0.0], "offset": 2.0},
        ]}
        return ProblemConfig.validate(data)
    if name == "spacecraft_cone":
        data = _spacecraft(shift_first_mean=True)
        # line-of-sight cone around the -y approach axis
        data["constraints"] = {
            "type": "cone",
            "matrix": [[1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                       [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]],
            "matrix_offset": [0.0, 0.0],
            "axis": [0.0, -0.76, 0.0, 0.0, 0.0, 0.0],
            "axis_offset": 2.0,
        }
        return ProblemConfig.validate(data)
    raise ConfigError(
        f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
