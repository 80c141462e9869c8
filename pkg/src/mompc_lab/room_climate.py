"""Single-room temperature, humidity and CO2 benchmark with an HVAC power/cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from mompc_lab.exceptions import InvalidInputError, InvalidProblemError
from mompc_lab.logging import log
from mompc_lab.mompc import DiscreteDynamics, StageCosts, heun_discretize
from mompc_lab.moo_core import FloatArray
from mompc_lab.nlp import NlpProblem, SolverConfig, solve_multistart

STATE_NAMES = ("T", "h", "c")
INPUT_NAMES = ("P_floor", "alpha_mix", "Q_vent", "dT_cond", "g_humid")
DISTURBANCE_NAMES = ("N_occ", "T_out", "S_solar", "m_h_dist")

SECONDS_PER_HOUR = 3600.0
WATTS_PER_KILOWATT = 1000.0

DISTURBANCES: dict[str, tuple[float, float, float, float]] = {
    "a": (2.0, 16.0, 200.0, 0.0),
    "b": (4.0, 28.0, 800.0, 0.5),
}
INITIAL_STATES: dict[int, tuple[float, float]] = {
    1: (24.0, 7.0),
    2: (24.0, 4.5),
    3: (17.0, 7.0),
    4: (17.0, 4.5),
}
ALL_CASES: tuple[str, ...] = tuple(f"{d}{i}" for d in DISTURBANCES for i in INITIAL_STATES)

# objective weights: temperature tracking, humidity tracking, input effort
ROOM_Q = (np.diag([1.0, 1e-6]), np.diag([1e-6, 1.0]), 1e-6 * np.eye(2))
ROOM_R = (1e-6 * np.eye(5), 1e-6 * np.eye(5), np.eye(5))


class RoomParams(BaseModel):
    """Physical constants of the room, its HVAC devices and the scaling."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rho_air: float = Field(default=1.2, gt=0, description="Air density [kg/m^3]")
    cp_air: float = Field(default=1005.0, gt=0, description="Specific heat of air [J/(kg K)]")
    v_room: float = Field(default=40.0, gt=0, description="Room volume [m^3]")
    c_room: float = Field(default=0.9e6, gt=0, description="Thermal capacity [J/K]")
    r_rw: float = Field(default=0.012, gt=0, description="Thermal resistance room/wall [K/W]")
    p_occ: float = Field(default=120.0, gt=0, description="Heat gain per occupant [W]")
    m_c_occ: float = Field(default=6.2, gt=0, description="CO2 generation per occupant [ppm kg/s]")
    m_h_occ: float = Field(default=1.39e-5, gt=0, description="Moisture generation per occupant [kg/s]")
    alpha_solar: float = Field(default=0.6, gt=0)
    a_solar: float = Field(default=1.0, gt=0, description="Effective solar area [m^2]")
    c_out: float = Field(default=500.0, gt=0, description="Outdoor CO2 [ppm]")
    h_out: float = Field(default=5e-3, gt=0, description="Outdoor absolute humidity [kg/kg]")
    p_sfp: float = Field(default=1000.0, gt=0, description="Specific fan power [W/(m^3/s)]")
    h_vap: float = Field(default=2.45e6, gt=0, description="Enthalpy of vaporization [J/kg]")
    eta: float = Field(default=0.7, gt=0, le=1, description="Humidifier efficiency")
    p_cop: float = Field(default=2.5, gt=0, description="Heat pump coefficient of performance")
    c_elec: float = Field(default=0.30, gt=0, description="Electricity price [EUR/kWh]")
    p_pump: float = Field(default=30.0, gt=0, description="Always-on floor heating pump [W]")
    smoothing: float = Field(default=50.0, gt=0, description="L of the smooth absolute value")
    s_h: float = Field(default=1e3, gt=0, description="Humidity scale")
    s_p: float = Field(default=1e-3, gt=0, description="Floor heating power scale")

    @property
    def m_air(self) -> float:
        return self.v_room * self.rho_air


class HorizonConfig(BaseModel):
    """Discretization and prediction horizon."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    h_macro: float = Field(default=60.0, gt=0, description="Controller sampling time [s]")
    m: int = Field(default=1, ge=1, description="Heun steps per macro step")
    t_horizon: float = Field(default=7200.0, gt=0, description="Prediction horizon [s]")

    @property
    def h_micro(self) -> float:
        return self.h_macro / self.m

    @property
    def n(self) -> int:
        return max(2, math.ceil(self.t_horizon / self.h_macro - 1e-9))


def smooth_abs(value: npt.ArrayLike, smoothing: float) -> FloatArray:
    """``sqrt(value^2 + 1/L)``."""
    value = np.asarray(value, dtype=float)
    return np.sqrt(value**2 + 1.0 / smoothing)


def room_ode(
    x: npt.ArrayLike, u: npt.ArrayLike, d: npt.ArrayLike, params: RoomParams | None = None, scaled: bool = True
) -> FloatArray:
    """Continuous-time right-hand side of the room model.

    ``x`` holds ``(T, h)`` or ``(T, h, c)`` on its last axis; the first two
    derivatives never depend on ``c``. Leading axes of ``x`` and ``u`` broadcast.
    With ``scaled=True`` the humidity quantities are multiplied by ``s_h`` and the
    floor heating power by ``s_p``; the disturbance is expected in the same units.
    """
    params = params or RoomParams()
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n_occ, t_out, s_solar, m_dist = np.asarray(d, dtype=float)
    s_h = params.s_h if scaled else 1.0
    s_p = params.s_p if scaled else 1.0

    t, h = x[..., 0], x[..., 1]
    p_floor = u[..., 0] / s_p
    mix, q, dt_cond, g = u[..., 1], u[..., 2], u[..., 3], u[..., 4]

    t_sup = mix * t + (1.0 - mix) * t_out + dt_cond
    h_sup = mix * h + (1.0 - mix) * params.h_out * s_h
    heat = (
        (t_out - t) / params.r_rw
        + p_floor
        + n_occ * params.p_occ
        + params.alpha_solar * params.a_solar * s_solar
        + params.rho_air * params.cp_air * q * (t_sup - t)
    )
    moisture = params.rho_air * q * (h_sup - h + g) + n_occ * params.m_h_occ * s_h + m_dist
    rates = [heat / params.c_room, moisture / params.m_air]
    if x.shape[-1] == 3:
        c = x[..., 2]
        c_sup = mix * c + (1.0 - mix) * params.c_out
        rates.append((q * (c_sup - c) + n_occ * params.m_c_occ) / params.m_air)
    return np.stack(np.broadcast_arrays(*rates), axis=-1)


def money_rate(u: npt.ArrayLike, params: RoomParams | None = None, scaled: bool = True) -> FloatArray:
    """Electricity cost rate in EUR/h.

    Device powers are computed in W and priced per kWh. The smooth absolute value
    acts on the physical (unscaled) humidifier flow.
    """
    params = params or RoomParams()
    u = np.asarray(u, dtype=float)
    s_h = params.s_h if scaled else 1.0
    s_p = params.s_p if scaled else 1.0
    p_floor = u[..., 0] / s_p
    q, dt_cond, g = u[..., 2], u[..., 3], u[..., 4] / s_h

    p_vent = params.p_sfp * q
    p_cond = q * params.rho_air * params.cp_air * smooth_abs(dt_cond, params.smoothing)
    p_humid = smooth_abs(g, params.smoothing) * params.h_vap / params.eta
    p_heat = p_floor / params.p_cop + params.p_pump
    return params.c_elec * (p_vent + p_cond + p_humid + p_heat) / WATTS_PER_KILOWATT


def state_bounds(params: RoomParams | None = None, scaled: bool = True) -> tuple[FloatArray, FloatArray]:
    """Box on ``(T, h, c)``."""
    params = params or RoomParams()
    s_h = params.s_h if scaled else 1.0
    return np.array([17.0, 4e-3 * s_h, 0.0]), np.array([25.0, 15e-3 * s_h, 1000.0])


def input_bounds(params: RoomParams | None = None, scaled: bool = True) -> tuple[FloatArray, FloatArray]:
    """Box on the five inputs; the humidifier limit is 0.4 kg/h converted to kg/s."""
    params = params or RoomParams()
    s_h = params.s_h if scaled else 1.0
    s_p = params.s_p if scaled else 1.0
    g_max = 0.4 / SECONDS_PER_HOUR * s_h
    return (
        np.array([0.0, 0.0, 0.0, -5.0, -g_max]),
        np.array([2000.0 * s_p, 1.0, 0.5, 5.0, g_max]),
    )


def oss_bounds(params: RoomParams | None = None) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """State and input boxes of the steady-state problem, scaled units."""
    params = params or RoomParams()
    u_lb, u_ub = input_bounds(params)
    x_lb = np.array([19.8, 5.5e-3 * params.s_h, 0.0])
    x_ub = np.array([22.2, 8.5e-3 * params.s_h, 700.0])
    return x_lb, x_ub, u_lb + np.array([0.0, 0.0, 0.05, 0.0, 0.0]), u_ub


def room_step_map(params: RoomParams, horizon: HorizonConfig):
    """Heun macro step of the scaled room model."""
    return heun_discretize(partial(room_ode, params=params), horizon.h_micro, horizon.m)


def solve_oss(
    params: RoomParams,
    d: npt.ArrayLike,
    horizon: HorizonConfig,
    config: SolverConfig,
    n_starts: int = 8,
    seed: int = 0,
) -> tuple[FloatArray, FloatArray]:
    """Cheapest steady state of the full three-state model.

    Minimizes :func:`money_rate` subject to ``x = f_DT(x, u, d)`` and the comfort
    boxes. Returns ``(x_ss, u_ss)`` in scaled units.

    Raises:
        InvalidProblemError: If no start reaches a feasible KKT point
    """
    d = np.asarray(d, dtype=float)
    step = room_step_map(params, horizon)
    x_lb, x_ub, u_lb, u_ub = oss_bounds(params)

    def objective(z: FloatArray) -> float:
        return float(money_rate(z[3:], params))

    def fixed_point(z: FloatArray) -> FloatArray:
        return step(z[:3], z[3:], d) - z[:3]

    guess = np.concatenate([0.5 * (x_lb + x_ub), 0.5 * (u_lb + u_ub)])
    problem = NlpProblem(
        dim=8,
        objective=objective,
        lower=np.concatenate([x_lb, u_lb]),
        upper=np.concatenate([x_ub, u_ub]),
        initial_guess=guess,
        equalities=fixed_point,
        name="room/oss",
    )
    report = solve_multistart(problem, config, n_starts, seed)
    if not report.ok:
        raise InvalidProblemError(
            f"steady-state problem infeasible for d={d.tolist()} (status {report.status}, "
            f"violation {report.constraint_violation:.3e})"
        )
    x_ss, u_ss = report.x_star[:3].copy(), report.x_star[3:].copy()
    log.info("steady state for d=%s: x=%s u=%s (%.4f EUR/h)", d.tolist(), x_ss, u_ss, objective(report.x_star))
    return x_ss, u_ss


def test_case(dist_id: str, init_id: int) -> tuple[FloatArray, FloatArray]:
    """Disturbance and reduced initial state ``(T, h)`` of a benchmark case.

    Raises:
        InvalidInputError: On an unknown disturbance or initial-state id
    """
    if dist_id not in DISTURBANCES or init_id not in INITIAL_STATES:
        raise InvalidInputError(f"unknown test case ({dist_id!r}, {init_id!r})")
    return np.array(DISTURBANCES[dist_id]), np.array(INITIAL_STATES[init_id])


def parse_case(case_id: str) -> tuple[str, int]:
    """Split a case label such as ``"a1"``.

    Raises:
        InvalidInputError: On a malformed or unknown label
    """
    if len(case_id) != 2 or not case_id[1].isdigit():
        raise InvalidInputError(f"malformed case id {case_id!r}, expected e.g. 'a1'")
    dist_id, init_id = case_id[0], int(case_id[1])
    test_case(dist_id, init_id)
    return dist_id, init_id


def reduced_dynamics(params: RoomParams, d: npt.ArrayLike, horizon: HorizonConfig) -> DiscreteDynamics:
    """Discrete ``(T, h)`` subsystem with the MPC state and input boxes."""
    x_lb, x_ub = state_bounds(params)
    u_lb, u_ub = input_bounds(params)
    return DiscreteDynamics(
        n_w=2,
        n_v=5,
        step_map=room_step_map(params, horizon),
        disturbance=np.asarray(d, dtype=float),
        w_lb=x_lb[:2],
        w_ub=x_ub[:2],
        v_lb=u_lb,
        v_ub=u_ub,
        name="room",
    )


@dataclass(frozen=True)
class RoomSetup:
    """Everything a closed-loop room run needs."""

    case_id: str
    disturbance: FloatArray
    x0: FloatArray
    x_ss: FloatArray
    u_ss: FloatArray
    dynamics: DiscreteDynamics
    costs: StageCosts


def room_setup(
    case_id: str, params: RoomParams, horizon: HorizonConfig, config: SolverConfig, seed: int = 0
) -> RoomSetup:
    """Solve the steady state of a case and assemble the reduced MPC model around it."""
    dist_id, init_id = parse_case(case_id)
    d, x0 = test_case(dist_id, init_id)
    x_ss, u_ss = solve_oss(params, d, horizon, config, seed=seed)
    costs = StageCosts(q=ROOM_Q, r=ROOM_R, w_ss=x_ss[:2], v_ss=u_ss)
    return RoomSetup(
        case_id=case_id,
        disturbance=d,
        x0=x0,
        x_ss=x_ss,
        u_ss=u_ss,
        dynamics=reduced_dynamics(params, d, horizon),
        costs=costs,
    )
