"""Scenario configs, trace/diagram CSV serialization.

The scenario config is a single JSON document (strict by default: unknown
keys are rejected, and *all* validation problems are reported together,
each with its field path).  The full schema:

    {
      "schema_version": 1,
      "topology": "open" | {"ring": {"L": <m>}},
      "params": {"kappa": <float>, "omega": <m>},

      // exactly one of:
      "vehicles": [{"v_max": <m/s>, "x0": <m>}, ...],   // front to back on open links
      "generator": {
          "count": <int>,            // ring: exactly one of count/density
          "density": <veh/m>,        // open: both count and density (spacing = 1/density)
          "placement": "uniform" | {"two_region": {"fraction": <0..1>, "rho_jam": <veh/m>}},
          "v_max": <m/s> | [<m/s>, ...]
      },

      "integrator": {"dt": <s>, "horizon": <s>, "sample_every": <int>,
                     "adaptive": <bool>, "tol": <float>},   // optional, all optional
      "outputs": ["trace", "timespace_svg", "minmax_svg"]   // optional
    }

Trace files are CSV with header ``t,vehicle_id,x,v``, rows sorted by
(t, vehicle_id), LF line endings, UTF-8, and floats printed with full
round-trip precision.  Diagram files use header ``rho,v_eq,q``.
"""

from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from .analysis import DiagramSeries
from .core import (
    ModelParams,
    OpenLink,
    Ring,
    Scenario,
    Topology,
    ValidationError,
    VehicleSpec,
)
from .engine import IntegratorConfig, SimTrace, build_two_region_ring

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "parse_scenario",
    "canonical_text",
    "write_trace",
    "read_trace",
    "write_diagram",
    "read_diagram",
]

SCHEMA_VERSION = 1
TRACE_HEADER = "t,vehicle_id,x,v"
DIAGRAM_HEADER = "rho,v_eq,q"
KNOWN_OUTPUTS = ("trace", "timespace_svg", "minmax_svg")


class ConfigError(ValidationError):
    """All the problems found in one config, each with its field path."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = list(errors)
        lines = [f"  {path}: {msg}" for path, msg in self.errors]
        super().__init__("invalid scenario config:\n" + "\n".join(lines))


class _Collector:
    def __init__(self, permissive: bool):
        self.errors: list[tuple[str, str]] = []
        self.permissive = permissive

    def error(self, path: str, msg: str) -> None:
        self.errors.append((path, msg))

    def unknown(self, path: str, keys: set[str]) -> None:
        for k in sorted(keys):
            where = f"{path}.{k}" if path else k
            if self.permissive:
                warnings.warn(f"ignoring unknown config key {where!r}", stacklevel=4)
            else:
                self.error(where, "unknown key")

    def raise_if_any(self) -> None:
        if self.errors:
            raise ConfigError(self.errors)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _positive(c: _Collector, obj: dict, path: str, key: str) -> Optional[float]:
    v = obj.get(key)
    if not _is_num(v) or v <= 0:
        c.error(f"{path}.{key}", f"must be a finite number > 0, got {v!r}")
        return None
    return float(v)


@dataclass(frozen=True)
class ScenarioConfig:
    """A validated config: normalized payload plus ready-to-use pieces."""

    data: dict
    topology: Topology
    params: ModelParams
    vehicles: Optional[tuple[VehicleSpec, ...]]
    generator: Optional[dict]
    integrator: dict
    outputs: tuple[str, ...]

    def build_scenario(self) -> Scenario:
        if self.vehicles is not None:
            return Scenario(params=self.params, topology=self.topology,
                            vehicles=self.vehicles)
        return _generate(self.generator, self.topology, self.params)

    def integrator_config(self, horizon: Optional[float] = None,
                          dt: Optional[float] = None,
                          sample_every: Optional[int] = None) -> IntegratorConfig:
        merged = dict(self.integrator)
        if horizon is not None:
            merged["horizon"] = horizon
        if dt is not None:
            merged["dt"] = dt
        if sample_every is not None:
            merged["sample_every"] = sample_every
        if "horizon" not in merged:
            raise ValidationError(
                "no horizon: set integrator.horizon in the config or pass --horizon"
            )
        return IntegratorConfig(
            horizon=merged["horizon"],
            dt=merged.get("dt", 0.01),
            sample_every=merged.get("sample_every", 1),
            adaptive=merged.get("adaptive", False),
            tol=merged.get("tol", 1e-8),
        )


def _generate(gen: dict, topology: Topology, params: ModelParams) -> Scenario:
    v_max = gen["v_max"]
    if isinstance(topology, Ring):
        length = topology.L
        density = gen.get("density", gen.get("count", 0) / length)
        placement = gen.get("placement", "uniform")
        if isinstance(placement, dict):
            tr = placement["two_region"]
            return build_two_region_ring(params, length, density,
                                         tr["fraction"], tr["rho_jam"], v_max)
        count = gen.get("count", int(math.floor(density * length + 0.5)))
        vm = v_max if isinstance(v_max, list) else [v_max] * count
        vehicles = tuple(
            VehicleSpec(id=i, v_max=vm[i], x0=length * i / count)
            for i in range(count)
        )
        return Scenario(params=params, topology=topology, vehicles=vehicles)
    count = gen["count"]
    spacing = 1.0 / gen["density"]
    vm = v_max if isinstance(v_max, list) else [v_max] * count
    vehicles = tuple(
        VehicleSpec(id=i, v_max=vm[i], x0=-spacing * i) for i in range(count)
    )
    return Scenario(params=params, topology=topology, vehicles=vehicles)


def parse_scenario(text: str, permissive: bool = False) -> ScenarioConfig:
    """Parse and fully validate a config document.

    Raises ConfigError carrying *every* problem found, not just the first;
    JSON syntax errors report line and column.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([(f"line {e.lineno}, column {e.colno}", e.msg)]) from e
    if not isinstance(raw, dict):
        raise ConfigError([("", f"top level must be an object, got {type(raw).__name__}")])
    c = _Collector(permissive)
    known_top = {"schema_version", "topology", "params", "vehicles", "generator",
                 "integrator", "outputs"}
    c.unknown("", set(raw) - known_top)

    ver = raw.get("schema_version")
    if ver != SCHEMA_VERSION:
        c.error("schema_version", f"must be {SCHEMA_VERSION}, got {ver!r}")

    topology = _parse_topology(raw, c)
    params = _parse_params(raw, c)
    vehicles = generator = None
    has_explicit = "vehicles" in raw
    has_generator = "generator" in raw
    if has_explicit and has_generator:
        c.error("vehicles", "give either an explicit vehicle list or a generator, not both")
    elif not has_explicit and not has_generator:
        c.error("vehicles", "one of 'vehicles' or 'generator' is required")
    elif has_explicit:
        vehicles = _parse_vehicles(raw["vehicles"], topology, c)
    else:
        generator = _parse_generator(raw["generator"], topology, c)

    integrator = _parse_integrator(raw.get("integrator"), c)
    outputs = _parse_outputs(raw.get("outputs"), c)
    c.raise_if_any()

    return ScenarioConfig(
        data=raw,
        topology=topology,
        params=params,
        vehicles=vehicles,
        generator=generator,
        integrator=integrator,
        outputs=outputs,
    )


def _parse_topology(raw: dict, c: _Collector) -> Topology:
    topo = raw.get("topology")
    if topo == "open":
        return OpenLink()
    if isinstance(topo, dict) and set(topo) == {"ring"}:
        ring = topo["ring"]
        if isinstance(ring, dict):
            c.unknown("topology.ring", set(ring) - {"L"})
            length = _positive(c, ring, "topology.ring", "L")
            if length is not None:
                return Ring(L=length)
        else:
            c.error("topology.ring", f"must be an object with key 'L', got {ring!r}")
    else:
        c.error("topology", f"must be \"open\" or {{\"ring\": {{\"L\": ...}}}}, got {topo!r}")
    return OpenLink()


def _parse_params(raw: dict, c: _Collector) -> ModelParams:
    p = raw.get("params")
    if not isinstance(p, dict):
        c.error("params", f"must be an object with kappa and omega, got {p!r}")
        return ModelParams(kappa=1.0, omega=1.0)
    c.unknown("params", set(p) - {"kappa", "omega"})
    kappa = _positive(c, p, "params", "kappa")
    omega = _positive(c, p, "params", "omega")
    if kappa is None or omega is None:
        return ModelParams(kappa=1.0, omega=1.0)
    return ModelParams(kappa=kappa, omega=omega)


def _parse_vehicles(
    raw: Any, topology: Topology, c: _Collector
) -> Optional[tuple[VehicleSpec, ...]]:
    if not isinstance(raw, list) or not raw:
        c.error("vehicles", f"must be a non-empty list, got {raw!r}")
        return None
    specs: list[VehicleSpec] = []
    ok = True
    for i, item in enumerate(raw):
        path = f"vehicles[{i}]"
        if not isinstance(item, dict):
            c.error(path, f"must be an object, got {item!r}")
            ok = False
            continue
        c.unknown(path, set(item) - {"v_max", "x0"})
        vm = _positive(c, item, path, "v_max")
        x0 = item.get("x0")
        if not _is_num(x0):
            c.error(f"{path}.x0", f"must be a finite number, got {x0!r}")
            ok = False
        if vm is None:
            ok = False
        if ok:
            specs.append(VehicleSpec(id=i, v_max=vm, x0=float(x0)))
    if not ok:
        return None
    if isinstance(topology, OpenLink):
        x0s = [s.x0 for s in specs]
        if any(b > a for a, b in zip(x0s[:-1], x0s[1:])):
            c.error("vehicles", "open-link vehicles must be listed front to back "
                                "(x0 non-increasing)")
            return None
    return tuple(specs)


def _parse_generator(raw: Any, topology: Topology, c: _Collector) -> Optional[dict]:
    if not isinstance(raw, dict):
        c.error("generator", f"must be an object, got {raw!r}")
        return None
    c.unknown("generator", set(raw) - {"count", "density", "placement", "v_max"})
    out: dict[str, Any] = {}
    has_count = "count" in raw
    has_density = "density" in raw
    if has_count:
        cnt = raw["count"]
        if not isinstance(cnt, int) or isinstance(cnt, bool) or cnt < 1:
            c.error("generator.count", f"must be an integer >= 1, got {cnt!r}")
        else:
            out["count"] = cnt
    if has_density:
        d = _positive(c, raw, "generator", "density")
        if d is not None:
            out["density"] = d
    if isinstance(topology, Ring):
        if has_count == has_density:
            c.error("generator", "on a ring give exactly one of count/density")
    else:
        if not (has_count and has_density):
            c.error("generator", "on an open link give both count (fleet size) "
                                 "and density (1/spacing)")
    placement = raw.get("placement", "uniform")
    if placement == "uniform":
        out["placement"] = "uniform"
    elif isinstance(placement, dict) and set(placement) == {"two_region"}:
        tr = placement["two_region"]
        if not isinstance(topology, Ring):
            c.error("generator.placement", "two_region placement needs a ring topology")
        elif not isinstance(tr, dict):
            c.error("generator.placement.two_region", f"must be an object, got {tr!r}")
        else:
            c.unknown("generator.placement.two_region", set(tr) - {"fraction", "rho_jam"})
            frac = tr.get("fraction")
            if not _is_num(frac) or not 0.0 <= frac <= 1.0:
                c.error("generator.placement.two_region.fraction",
                        f"must lie in [0, 1], got {frac!r}")
            rho_jam = _positive(c, tr, "generator.placement.two_region", "rho_jam")
            if _is_num(frac) and 0.0 <= frac <= 1.0 and rho_jam is not None:
                out["placement"] = {"two_region": {"fraction": float(frac),
                                                   "rho_jam": rho_jam}}
    else:
        c.error("generator.placement",
                f"must be \"uniform\" or {{\"two_region\": ...}}, got {placement!r}")
    vm = raw.get("v_max")
    if isinstance(vm, list):
        if not vm or not all(_is_num(v) and v > 0 for v in vm):
            c.error("generator.v_max", "list entries must all be finite numbers > 0")
        elif "count" in out and len(vm) != out["count"]:
            c.error("generator.v_max",
                    f"list length {len(vm)} must equal count {out['count']}")
        else:
            out["v_max"] = [float(v) for v in vm]
    elif _is_num(vm) and vm > 0:
        out["v_max"] = float(vm)
    else:
        c.error("generator.v_max", f"must be a number > 0 or a list, got {vm!r}")
    return out if "v_max" in out else None


def _parse_integrator(raw: Any, c: _Collector) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        c.error("integrator", f"must be an object, got {raw!r}")
        return {}
    c.unknown("integrator", set(raw) - {"dt", "horizon", "sample_every", "adaptive", "tol"})
    out: dict[str, Any] = {}
    for key in ("dt", "tol"):
        if key in raw:
            v = _positive(c, raw, "integrator", key)
            if v is not None:
                out[key] = v
    if "horizon" in raw:
        h = raw["horizon"]
        if not _is_num(h) or h < 0:
            c.error("integrator.horizon", f"must be a finite number >= 0, got {h!r}")
        else:
            out["horizon"] = float(h)
    if "sample_every" in raw:
        se = raw["sample_every"]
        if not isinstance(se, int) or isinstance(se, bool) or se < 1:
            c.error("integrator.sample_every", f"must be an integer >= 1, got {se!r}")
        else:
            out["sample_every"] = se
    if "adaptive" in raw:
        a = raw["adaptive"]
        if not isinstance(a, bool):
            c.error("integrator.adaptive", f"must be a boolean, got {a!r}")
        else:
            out["adaptive"] = a
    return out


def _parse_outputs(raw: Any, c: _Collector) -> tuple[str, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        c.error("outputs", f"must be a list, got {raw!r}")
        return ()
    out = []
    for i, item in enumerate(raw):
        if item not in KNOWN_OUTPUTS:
            c.error(f"outputs[{i}]", f"unknown product {item!r}; "
                                     f"known: {', '.join(KNOWN_OUTPUTS)}")
        else:
            out.append(item)
    return tuple(out)


def canonical_text(config: ScenarioConfig) -> str:
    """Canonical re-emission: sorted keys, two-space indent, trailing newline.

    Parsing the canonical text yields an identical config; re-emitting that
    reproduces the same bytes.
    """
    return json.dumps(config.data, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# trace / diagram CSV


def _repr_f(v: float) -> str:
    return repr(float(v))


def _open_sink(sink):
    if hasattr(sink, "write"):
        return sink, False
    return open(Path(sink), "w", encoding="utf-8", newline=""), True


def write_trace(trace: SimTrace, sink: Union[str, Path, io.TextIOBase]) -> None:
    """Write a trace as CSV, deterministically and at full precision.

    Rows are (t, vehicle_id, x, v) sorted by (t, vehicle_id); floats are
    printed with shortest round-trip representation so read_trace recovers
    the exact doubles.
    """
    fh, close = _open_sink(sink)
    try:
        fh.write(TRACE_HEADER + "\n")
        n = trace.n
        chunk: list[str] = []
        for i in range(trace.times.size):
            t_s = _repr_f(trace.times[i])
            row_x = trace.states[i]
            row_v = trace.velocities[i]
            for vid in range(n):
                chunk.append(f"{t_s},{vid},{_repr_f(row_x[vid])},{_repr_f(row_v[vid])}\n")
            if len(chunk) >= 8192:
                fh.write("".join(chunk))
                chunk.clear()
        fh.write("".join(chunk))
    finally:
        if close:
            fh.close()


def read_trace(
    source: Union[str, Path, io.TextIOBase], topology: Topology = OpenLink()
) -> SimTrace:
    """Read a trace CSV back into memory (lossless for the numeric payload).

    The file format carries neither topology nor events; pass the topology
    explicitly if it matters downstream.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise ValidationError(f"trace file must start with header {TRACE_HEADER!r}")
    times: list[float] = []
    rows: list[list[float]] = []
    vrows: list[list[float]] = []
    n = None
    cur_t: Optional[str] = None
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise ValidationError(f"line {ln}: expected 4 fields, got {len(parts)}")
        t_s, vid_s, x_s, v_s = parts
        vid = int(vid_s)
        if t_s != cur_t:
            if n is None and rows:
                n = len(rows[-1])
            cur_t = t_s
            times.append(float(t_s))
            rows.append([])
            vrows.append([])
        if vid != len(rows[-1]):
            raise ValidationError(f"line {ln}: vehicle ids must be 0..N-1 per time")
        rows[-1].append(float(x_s))
        vrows[-1].append(float(v_s))
    if not rows:
        raise ValidationError("trace file has no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValidationError("every sampled time must list all vehicles")
    return SimTrace(
        times=np.array(times),
        states=np.array(rows),
        velocities=np.array(vrows),
        topology=topology,
        events=(),
    )


def write_diagram(series: DiagramSeries, sink: Union[str, Path, io.TextIOBase]) -> None:
    """Write a flow-density series as CSV with header ``rho,v_eq,q``."""
    fh, close = _open_sink(sink)
    try:
        fh.write(DIAGRAM_HEADER + "\n")
        for i in range(series.rho.size):
            fh.write(f"{_repr_f(series.rho[i])},{_repr_f(series.v_eq[i])},"
                     f"{_repr_f(series.q[i])}\n")
    finally:
        if close:
            fh.close()


def read_diagram(source: Union[str, Path, io.TextIOBase]) -> DiagramSeries:
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != DIAGRAM_HEADER:
        raise ValidationError(f"diagram file must start with header {DIAGRAM_HEADER!r}")
    data = np.array([[float(x) for x in line.split(",")] for line in lines[1:]])
    if data.size == 0:
        raise ValidationError("diagram file has no data rows")
    q = data[:, 2]
    peak = int(np.argmax(q))
    return DiagramSeries(rho=data[:, 0], v_eq=data[:, 1], q=q,
                         peak_rho=float(data[peak, 0]), peak_q=float(q[peak]))
