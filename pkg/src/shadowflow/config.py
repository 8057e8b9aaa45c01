"""Run configuration: YAML schema, presets and validation."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, fields

import numpy as np
import yaml

from .bubbles import BubbleState
from .flow_field import FlowConstants, FlowSystem, in_V
from .geometry import MorseField, builtin_field, check_nondegeneracy, find_critical_points
from .integrator import IntegratorConfig
from .reduced_energy import LAMBDA_FLOOR, ExpansionConstants, PerturbationField, solve_balanced_alpha

SUPPORTED_N = range(5, 10)
PRESETS = ("existence", "tower", "off_critical", "saddle_negative_laplacian", "toy")


class ConfigError(ValueError):
    """A run configuration failed validation; ``problems`` lists every issue."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


def _plain(x):
    """numpy -> builtin types, recursively, for YAML/JSON output."""
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    return x


@dataclass
class RunConfig:
    name: str
    n: int = 6
    q: int = 2
    model: str = "shadow"
    seed: int = 0
    field: dict | None = None          # None -> builtin field
    initial: dict = dataclasses.field(default_factory=dict)
    flow: dict = dataclasses.field(default_factory=dict)
    expansion: dict = dataclasses.field(default_factory=dict)
    perturbation: dict = dataclasses.field(default_factory=lambda: {"mode": "none"})
    g_scale: float = 1.0
    integrator: dict = dataclasses.field(default_factory=dict)
    dump_cutoffs: bool = False
    toy: dict = dataclasses.field(default_factory=dict)

    # -- (de)serialisation ---------------------------------------------------

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"unknown key(s): {', '.join(sorted(unknown))}"])
        if "name" not in d:
            raise ConfigError(["missing key: name"])
        d = copy.deepcopy(d)
        for key in ("initial", "flow", "expansion", "integrator", "toy"):
            if d.get(key) is None:
                d[key] = {}
        if d.get("perturbation") is None:
            d["perturbation"] = {"mode": "none"}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError([str(exc)]) from exc

    @classmethod
    def from_yaml(cls, text):
        data = yaml.safe_load(text)
        if not isinstance(data, dict):
            raise ConfigError(["configuration must be a mapping"])
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_yaml(fh.read())

    def to_dict(self, resolved=True):
        """Serialise; with ``resolved`` every default is written out explicitly."""
        d = {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}
        if resolved and self.model == "shadow":
            d["field"] = self.build_field().to_dict()
            d["flow"] = self.flow_constants().to_dict()
            d["expansion"] = self.expansion_constants().to_dict()
            d["integrator"] = self.integrator_config().to_dict()
        return _plain(d)

    def to_yaml(self, resolved=True):
        return yaml.safe_dump(self.to_dict(resolved), sort_keys=False)

    # -- builders --------------------------------------------------------------

    def build_field(self):
        if self.field is None or self.field == "builtin":
            return builtin_field(self.n)
        return MorseField.from_dict(self.field, self.n)

    def flow_constants(self):
        return FlowConstants.for_q(self.q, **self.flow)

    def expansion_constants(self):
        return ExpansionConstants(**self.expansion)

    def integrator_config(self):
        return IntegratorConfig(**self.integrator)

    def build_perturbation(self):
        p = dict(self.perturbation)
        mode = p.get("mode", "none")
        if mode == "none":
            return PerturbationField()
        return PerturbationField(mode, MorseField.from_dict(p["field"], self.n))

    def build_system(self, K=None):
        return FlowSystem(K if K is not None else self.build_field(), self.flow_constants(),
                          self.expansion_constants(), self.build_perturbation(), float(self.g_scale))

    def initial_state(self, K=None):
        K = K if K is not None else self.build_field()
        ini = self.initial
        centers = np.array(ini["centers"], dtype=float).reshape(self.q, self.n)
        jitter = float(ini.get("jitter", 0.0))
        if jitter > 0:
            rng = np.random.default_rng(self.seed)
            dirs = rng.normal(size=centers.shape)
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            centers = centers + jitter * rng.uniform(0, 1, size=(self.q, 1)) * dirs
        lam = np.array(ini["lambda"], dtype=float).reshape(-1)
        alpha = ini.get("alpha", "balanced")
        if isinstance(alpha, str):
            if alpha != "balanced":
                raise ConfigError([f"alpha must be a list or 'balanced', got {alpha!r}"])
            alpha = solve_balanced_alpha(K.value(np.mod(centers, 1.0)), self.n,
                                         float(ini.get("norm", 1.0)), self.expansion_constants().cbar0)
        return BubbleState.from_lambda(alpha, centers, lam, float(ini.get("vnorm", 0.0)))

    # -- validation ------------------------------------------------------------

    def problems(self):
        """Every violated invariant, as human-readable strings (empty if valid)."""
        out = []
        if self.model not in ("shadow", "toy"):
            return [f"model must be 'shadow' or 'toy', got {self.model!r}"]
        if self.model == "toy":
            try:
                x0 = np.asarray(self.toy["x0"], dtype=float)
                b = np.asarray(self.toy["b"], dtype=float)
                if len(b) != len(x0) - 1:
                    out.append("toy: need len(b) == len(x0) - 1")
                if not x0[-1] > 0:
                    out.append("toy: x_n(0) must be positive")
                if not float(self.toy.get("t_end", 1.0)) > 0:
                    out.append("toy: t_end must be positive")
            except (KeyError, TypeError, ValueError) as exc:
                out.append(f"toy: {exc}")
            return out
        if self.n not in SUPPORTED_N:
            out.append(f"n={self.n} outside the supported range 5..9")
            return out
        if self.q < 1:
            out.append("q must be at least 1")
            return out
        try:
            fc = self.flow_constants()
            out += fc.violations(self.q)
            self.expansion_constants()
            self.integrator_config()
            self.build_perturbation().validate(self.n)
        except (TypeError, ValueError) as exc:
            out.append(str(exc))
            return out
        try:
            K = self.build_field()
            crits = find_critical_points(K)
        except (TypeError, ValueError, KeyError) as exc:
            out.append(f"field: {exc}")
            return out
        nd = check_nondegeneracy(K, crits)
        out += [f"nondegeneracy: {v}" for v in nd.violations]
        try:
            s0 = self.initial_state(K)
        except (KeyError, TypeError, ValueError) as exc:
            out.append(f"initial state: {exc}")
            return out
        if np.any(s0.log_lam < np.log(LAMBDA_FLOOR)):
            out.append(f"initial lambda below lambda_floor={LAMBDA_FLOOR:g}")
        ok, reasons = in_V(s0, K, fc.eps_V, self.g_scale)
        out += [f"initial state not in V: {r}" for r in reasons]
        return out

    def validate(self):
        bad = self.problems()
        if bad:
            raise ConfigError(bad)
        return self


# -- presets -----------------------------------------------------------------


def _unit(n, axis=0):
    e = np.zeros(n)
    e[axis] = 1.0
    return e


def preset(name, n=6, seed=0):
    """RunConfig reproducing one of the built-in scenarios on T^n."""
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r}; choose from {', '.join(PRESETS)}"])
    base = dict(name=name, n=n, seed=seed)
    if name == "existence":
        # the two global maxima of the builtin field, balanced, v essentially 0
        centers = [np.zeros(n), 0.5 * _unit(n)]
        return RunConfig(q=2, initial={"centers": _plain(centers), "lambda": [1e4, 2e4],
                                       "alpha": "balanced", "norm": 1.0, "vnorm": 1e-10}, **base)
    if name == "tower":
        # two bubbles on the same maximum; separated just enough that
        # eps_12 = 27^-2 < eps_V so that the start lies in V
        lam = 1e3
        sep = np.sqrt(27.0 ** (4.0 / (n - 2)) - 2.0) / lam
        centers = [-0.5 * sep * _unit(n), 0.5 * sep * _unit(n)]
        return RunConfig(q=2, initial={"centers": _plain(np.mod(centers, 1.0)), "lambda": [lam, lam],
                                       "alpha": "balanced", "norm": 1.0, "vnorm": 1e-10}, **base)
    if name == "off_critical":
        centers = [0.1 * _unit(n, 1)]
        return RunConfig(q=1, initial={"centers": _plain(centers), "lambda": [1e3],
                                       "alpha": "balanced", "norm": 1.0, "vnorm": 1e-10},
                         integrator={"t_max": 50.0}, **base)
    if name == "saddle_negative_laplacian":
        # Morse index n - 1, Laplacian still negative
        centers = [0.5 * _unit(n, n - 1)]
        return RunConfig(q=1, initial={"centers": _plain(centers), "lambda": [1e4],
                                       "alpha": "balanced", "norm": 1.0, "vnorm": 1e-10}, **base)
    return RunConfig(model="toy", q=1, toy={"x0": [1.0, 1.0], "b": [1.0], "t_end": 1.0}, **base)

