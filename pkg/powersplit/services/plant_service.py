"""
Plant Service: electro-thermal simulation of one battery string.

One simulation step chains an inverter loss model, an SOC-OCV lookup, an
equivalent-circuit (OCV + series resistance) cell current, ohmic and
inverter heat, a lumped-mass thermal update and Coulomb counting.

Units: powers in kW at string level and W at cell level, energy in kWh,
time in hours, current in A, capacity in Ah, temperature in °C.
Battery power is positive when charging; cell current is positive when
discharging.
"""

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import structlog

from services.errors import ConfigError, DomainError, InfeasiblePowerError

logger = structlog.get_logger(__name__)

NOMINAL_CELL_VOLTAGE = 3.7

# NMC-like open circuit voltage, 3.0 V empty to 4.2 V full
_DEFAULT_OCV = (
    (0.0, 3.00), (0.1, 3.45), (0.2, 3.55), (0.3, 3.62), (0.4, 3.66),
    (0.5, 3.70), (0.6, 3.76), (0.7, 3.84), (0.8, 3.93), (0.9, 4.05),
    (1.0, 4.20),
)


@dataclass(frozen=True)
class OcvCurve:
    """Piecewise-linear SOC -> open circuit voltage table"""
    breakpoints: Tuple[Tuple[float, float], ...] = _DEFAULT_OCV

    def __post_init__(self):
        points = tuple((float(s), float(v)) for s, v in self.breakpoints)
        object.__setattr__(self, 'breakpoints', points)
        if len(points) < 2:
            raise ConfigError("OCV curve needs at least two breakpoints")
        socs = np.array([p[0] for p in points])
        volts = np.array([p[1] for p in points])
        if socs[0] != 0.0 or socs[-1] != 1.0:
            raise ConfigError("OCV breakpoints must cover SOC 0 to 1",
                              first=socs[0], last=socs[-1])
        if np.any(np.diff(socs) <= 0):
            raise ConfigError("OCV SOC breakpoints must be strictly increasing")
        if np.any(np.diff(volts) <= 0):
            raise ConfigError("OCV voltages must be strictly increasing")

    @property
    def socs(self) -> np.ndarray:
        return np.array([p[0] for p in self.breakpoints])

    @property
    def voltages(self) -> np.ndarray:
        return np.array([p[1] for p in self.breakpoints])


@dataclass(frozen=True)
class ThermalParams:
    """Lumped thermal mass: heat gain k1 (K/kWh), loss rate k2 (1/h), ambient tau_air (°C)"""
    k1: float
    k2: float
    tau_air: float = 25.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ConfigError("Thermal coefficients k1 and k2 must be > 0",
                              k1=self.k1, k2=self.k2)

    @classmethod
    def from_geometry(cls, area_m2: float, height_m: float, density: float,
                      heat_capacity: float, h_conv: float,
                      tau_air: float = 25.0) -> 'ThermalParams':
        """Derive k1/k2 from module footprint, height, density (kg/m3),
        specific heat (J/kgK) and convective coefficient (W/m2K)."""
        mass = density * area_m2 * height_m
        k1 = 3.6e6 / (mass * heat_capacity)
        k2 = 3600.0 * h_conv * area_m2 / (mass * heat_capacity)
        return cls(k1=k1, k2=k2, tau_air=tau_air)

    @classmethod
    def for_string(cls, energy_kwh: float, specific_energy: float = 0.12,
                   heat_capacity: float = 1000.0, time_constant_h: float = 10.0,
                   tau_air: float = 25.0) -> 'ThermalParams':
        """Thermal mass scaled with string energy (kWh/kg), relaxation time 1/k2."""
        mass = energy_kwh / specific_energy
        return cls(k1=3.6e6 / (mass * heat_capacity), k2=1.0 / time_constant_h,
                   tau_air=tau_air)


@dataclass(frozen=True)
class InverterParams:
    """Inverter loss a0 + a1|p| + a2 p^2 (kW, -, 1/kW)"""
    a0: float
    a1: float
    a2: float

    def __post_init__(self):
        if min(self.a0, self.a1, self.a2) < 0:
            raise ConfigError("Inverter loss coefficients must be >= 0",
                              a0=self.a0, a1=self.a1, a2=self.a2)

    @classmethod
    def for_rating(cls, rating_kw: float) -> 'InverterParams':
        # ~97.9 % one-way at rated power
        return cls(a0=0.001 * rating_kw, a1=0.008, a2=0.012 / rating_kw)

    def loss(self, p: float) -> float:
        if p == 0:
            return 0.0
        q = abs(p)
        return self.a0 + self.a1 * q + self.a2 * q * q

    def dead_band(self, rating_kw: float) -> float:
        """Largest |p| at which the loss would reach the throughput itself."""
        margin = 1.0 - self.a1 - self.a2 * rating_kw
        return self.a0 / margin if margin > 0 else math.inf


@dataclass(frozen=True)
class StringSpec:
    """Static parameters of one battery string"""
    energy_capacity: float              # kWh
    power_rating: float                 # kW
    n_cells: int
    cell_capacity: float                # Ah
    internal_resistance_per_cell: float  # Ohm
    soc_min: float = 0.05
    soc_max: float = 0.95
    ocv_curve: OcvCurve = field(default_factory=OcvCurve)
    thermal: ThermalParams = None
    inverter: InverterParams = None
    name: str = 'string'

    def __post_init__(self):
        if self.thermal is None:
            object.__setattr__(self, 'thermal', ThermalParams.for_string(self.energy_capacity))
        if self.inverter is None:
            object.__setattr__(self, 'inverter', InverterParams.for_rating(self.power_rating))

        errors = {}
        if self.energy_capacity <= 0:
            errors['energy_capacity'] = self.energy_capacity
        if self.power_rating <= 0:
            errors['power_rating'] = self.power_rating
        if self.n_cells < 1:
            errors['n_cells'] = self.n_cells
        if self.cell_capacity <= 0:
            errors['cell_capacity'] = self.cell_capacity
        if self.internal_resistance_per_cell <= 0:
            errors['internal_resistance_per_cell'] = self.internal_resistance_per_cell
        if not 0 <= self.soc_min < self.soc_max <= 1:
            errors['soc_range'] = (self.soc_min, self.soc_max)
        if errors:
            raise ConfigError(f"Invalid string spec '{self.name}'", **errors)

        # loss(p) < |p| above the dead band, checked at the worst point (rated power)
        if self.inverter.loss(self.power_rating) >= self.power_rating:
            raise ConfigError(f"Inverter of '{self.name}' loses all power at rating",
                              rating=self.power_rating)

    @classmethod
    def build(cls, name: str, energy_kwh: float, power_kw: float, n_cells: int,
              resistance: float = 0.002, **overrides) -> 'StringSpec':
        """String of identical cells at the nominal cell voltage."""
        cell_capacity = energy_kwh * 1000.0 / (n_cells * NOMINAL_CELL_VOLTAGE)
        return cls(energy_capacity=energy_kwh, power_rating=power_kw, n_cells=n_cells,
                   cell_capacity=cell_capacity, internal_resistance_per_cell=resistance,
                   name=name, **overrides)

    @classmethod
    def default_pair(cls) -> Tuple['StringSpec', 'StringSpec']:
        """The two heterogeneous strings of the 500 kWh / 125 kW system."""
        return (cls.build('string-1', 300.0, 75.0, 768),
                cls.build('string-2', 200.0, 50.0, 512))


@dataclass(frozen=True)
class StringState:
    soc: float
    temperature: float

    def __post_init__(self):
        if not 0.0 <= self.soc <= 1.0:
            raise DomainError("SOC outside [0, 1]", soc=self.soc)
        if not math.isfinite(self.temperature):
            raise DomainError("Temperature is not finite", temperature=self.temperature)


@dataclass(frozen=True)
class SimStepResult:
    p_set: float
    p_applied: float
    p_inv_loss: float
    p_ohmic: float
    p_heat: float
    cell_current: float
    ocv: float
    new_state: StringState
    soc_limited: bool = False
    rate_limited: bool = False
    soc_clamped: bool = False

    @property
    def p_loss(self) -> float:
        """Electrical loss of the step: inverter plus cell ohmic (kW)"""
        return self.p_inv_loss + self.p_ohmic


def inverter_loss(p: float, params: InverterParams, rating: float = None) -> float:
    """Inverter loss for throughput p (kW); zero when idle."""
    if rating is not None and abs(p) > rating * (1 + 1e-12):
        raise DomainError(f"|p|={abs(p)} kW exceeds inverter rating {rating} kW",
                          p=p, rating=rating)
    return params.loss(p)


def ocv_from_soc(soc: float, curve: OcvCurve) -> float:
    if not 0.0 <= soc <= 1.0:
        raise DomainError("SOC outside [0, 1]", soc=soc)
    return float(np.interp(soc, curve.socs, curve.voltages))


def cell_current(p_cell: float, ocv: float, r: float) -> float:
    """Cell current (A, discharge positive) delivering p_cell W from an OCV source behind r.

    Small root of p = ocv*I - r*I^2, written in the cancellation-free form.
    """
    if r <= 0:
        raise DomainError("Internal resistance must be > 0", r=r)
    disc = ocv * ocv - 4.0 * r * p_cell
    if disc < 0:
        raise InfeasiblePowerError(
            f"Cell power {p_cell:.3f} W exceeds deliverable limit {ocv * ocv / (4 * r):.3f} W",
            p_cell=p_cell, ocv=ocv, r=r,
        )
    return 2.0 * p_cell / (ocv + math.sqrt(disc))


def heat_power(current: float, r: float, n_cells: int, p_inv_loss: float) -> float:
    """All electrical losses of the step as heat (kW)."""
    return n_cells * current * current * r / 1000.0 + p_inv_loss


def thermal_step(tau_prev: float, p_heat_prev: float, params: ThermalParams,
                 dt: float) -> float:
    if dt <= 0:
        raise DomainError("Step length dt must be > 0", dt=dt)
    return tau_prev + dt * (params.k1 * p_heat_prev - params.k2 * (tau_prev - params.tau_air))


def coulomb_count(soc_prev: float, current: float, dt: float,
                  cell_capacity: float) -> Tuple[float, bool]:
    """Integrate cell current over the step. Returns (soc, clamped)."""
    if dt <= 0 or cell_capacity <= 0:
        raise DomainError("dt and cell_capacity must be > 0", dt=dt, cell_capacity=cell_capacity)
    soc = soc_prev - current * dt / cell_capacity
    if soc > 1.0:
        return 1.0, True
    if soc < 0.0:
        return 0.0, True
    return soc, False


def _ac_power_for_dc(p_dc: float, inv: InverterParams) -> float:
    """Invert p_dc = p - loss(p) for the AC set-point p."""
    if p_dc > 0:
        c = inv.a0 + p_dc
        b = 1.0 - inv.a1
        disc = b * b - 4.0 * inv.a2 * c
        if disc < 0:
            return math.inf
        return 2.0 * c / (b + math.sqrt(disc))
    if p_dc < 0:
        c = inv.a0 + p_dc
        if c >= 0:
            return 0.0
        b = 1.0 + inv.a1
        q = -2.0 * c / (b + math.sqrt(b * b - 4.0 * inv.a2 * c))
        return -q
    return 0.0


def _soc_after(state: StringState, p: float, spec: StringSpec, dt: float) -> float:
    p_dc = p - spec.inverter.loss(p)
    ocv = ocv_from_soc(state.soc, spec.ocv_curve)
    current = cell_current(-p_dc * 1000.0 / spec.n_cells, ocv, spec.internal_resistance_per_cell)
    return state.soc - current * dt / spec.cell_capacity


def _power_to_reach(state: StringState, target_soc: float, spec: StringSpec, dt: float) -> float:
    """AC set-point that moves the string exactly to target_soc in one step."""
    ocv = ocv_from_soc(state.soc, spec.ocv_curve)
    r = spec.internal_resistance_per_cell
    current = (state.soc - target_soc) * spec.cell_capacity / dt
    p_cell = ocv * current - current * current * r
    p_dc = -p_cell * spec.n_cells / 1000.0
    return _ac_power_for_dc(p_dc, spec.inverter)


def _max_discharge(state: StringState, spec: StringSpec) -> float:
    """Most negative AC set-point the equivalent circuit can deliver."""
    ocv = ocv_from_soc(state.soc, spec.ocv_curve)
    p_cell_max = ocv * ocv / (4.0 * spec.internal_resistance_per_cell) * (1.0 - 1e-9)
    return _ac_power_for_dc(-p_cell_max * spec.n_cells / 1000.0, spec.inverter)


def simulate_step(state: StringState, p_set: float, spec: StringSpec, dt: float) -> SimStepResult:
    """Advance one string by one step under set-point p_set (kW, charge positive)."""
    if dt <= 0:
        raise DomainError("Step length dt must be > 0", dt=dt)

    # power rating first
    p = min(max(float(p_set), -spec.power_rating), spec.power_rating)
    rate_limited = p != p_set

    if abs(p) <= spec.inverter.dead_band(spec.power_rating):
        p = 0.0

    # then SOC feasibility
    soc_limited = False
    if p > 0:
        if state.soc >= spec.soc_max:
            p, soc_limited = 0.0, True
        elif _soc_after(state, p, spec, dt) > spec.soc_max:
            p, soc_limited = min(p, _power_to_reach(state, spec.soc_max, spec, dt)), True
    elif p < 0:
        p = max(p, _max_discharge(state, spec))
        if state.soc <= spec.soc_min:
            p, soc_limited = 0.0, True
        elif _soc_after(state, p, spec, dt) < spec.soc_min:
            p, soc_limited = max(p, _power_to_reach(state, spec.soc_min, spec, dt)), True
    if soc_limited and abs(p) <= spec.inverter.dead_band(spec.power_rating):
        p = 0.0

    p_inv = inverter_loss(p, spec.inverter, spec.power_rating)
    p_dc = p - p_inv
    p_cell = -p_dc * 1000.0 / spec.n_cells

    ocv = ocv_from_soc(state.soc, spec.ocv_curve)
    r = spec.internal_resistance_per_cell
    current = cell_current(p_cell, ocv, r)
    soc, soc_clamped = coulomb_count(state.soc, current, dt, spec.cell_capacity)
    p_heat = heat_power(current, r, spec.n_cells, p_inv)
    tau = thermal_step(state.temperature, p_heat, spec.thermal, dt)

    if soc_limited or rate_limited:
        logger.debug('plant_power_clamped', string=spec.name, p_set=p_set, p_applied=p,
                     soc_limited=soc_limited, rate_limited=rate_limited)

    return SimStepResult(
        p_set=float(p_set),
        p_applied=p,
        p_inv_loss=p_inv,
        p_ohmic=p_heat - p_inv,
        p_heat=p_heat,
        cell_current=current,
        ocv=ocv,
        new_state=StringState(soc=soc, temperature=tau),
        soc_limited=soc_limited,
        rate_limited=rate_limited,
        soc_clamped=soc_clamped,
    )


def chemical_energy_delta(result: SimStepResult, spec: StringSpec, dt: float) -> float:
    """Energy moved into the cells' OCV source during the step (kWh)."""
    return -spec.n_cells * result.ocv * result.cell_current * dt / 1000.0


def _half_power_losses(spec: StringSpec, soc: float = 0.5) -> Tuple[float, float, float]:
    """(p, charging loss, discharging loss) at half rated power and the given SOC."""
    p = 0.5 * spec.power_rating
    ocv = ocv_from_soc(soc, spec.ocv_curve)
    r = spec.internal_resistance_per_cell
    losses = []
    for sign in (1.0, -1.0):
        p_inv = spec.inverter.loss(sign * p)
        p_dc = sign * p - p_inv
        current = cell_current(-p_dc * 1000.0 / spec.n_cells, ocv, r)
        losses.append(heat_power(current, r, spec.n_cells, p_inv))
    return p, losses[0], losses[1]


def lp_heat_coefficient(spec: StringSpec, soc: float = 0.5) -> float:
    """Average loss fraction at half rated power; the LP heat proxy slope."""
    p, loss_ch, loss_dch = _half_power_losses(spec, soc)
    return 0.5 * (loss_ch + loss_dch) / p


def lp_efficiency(spec: StringSpec, soc: float = 0.5) -> Tuple[float, float]:
    """(eta_ch, eta_dch) of the plant at half rated power, for LP calibration."""
    p, loss_ch, loss_dch = _half_power_losses(spec, soc)
    return (p - loss_ch) / p, p / (p + loss_dch)
