"""Physical and operational parameters of the tethered kite system."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    """Raised for inconsistent or invalid configuration values."""


@dataclass(frozen=True)
class KiteParams:
    """System parameters, SI units, angles in radians.

    Defaults describe a mid-size pumping-mode traction kite.
    """

    E: float = 5.0  # lift-to-drag ratio
    g_k: float = 0.1  # steering gain, rad/m
    v_w: float = 10.0  # wind speed, m/s
    A: float = 21.0  # projected kite area, m^2
    rho: float = 1.2  # air density, kg/m^3
    C_R: float = 1.0  # aerodynamic force coefficient
    delta_max: float = 0.7
    deltadot_max: float = 0.6  # 1/s
    v_winch_min: float = -5.0  # m/s
    v_a_min: float = 5.0  # m/s
    l_max: float = 300.0  # m
    theta_min: float = 0.35  # minimum elevation, rad
    gamma_q: float = 0.01  # quaternion norm damping, 1/s

    def __post_init__(self):
        for name in ("E", "g_k", "v_w", "A", "rho", "C_R", "delta_max",
                     "deltadot_max", "v_a_min", "l_max"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"params.{name} must be > 0, got {value!r}")
        if not self.v_winch_min < 0:
            raise ConfigError(f"params.v_winch_min must be < 0, got {self.v_winch_min!r}")
        if not 0 < self.theta_min < math.pi / 2:
            raise ConfigError(f"params.theta_min must lie in (0, pi/2), got {self.theta_min!r}")
        if not self.gamma_q >= 0:
            raise ConfigError(f"params.gamma_q must be >= 0, got {self.gamma_q!r}")

    @property
    def force_coeff(self) -> float:
        """Factor mapping v_a**2 to tether force, rho*A*C_R/2 * E/sqrt(1+E^2)."""
        return 0.5 * self.rho * self.A * self.C_R * self.E / math.sqrt(1.0 + self.E ** 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "KiteParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown params field(s): {sorted(unknown)}")
        try:
            return cls(**{k: float(v) for k, v in data.items()})
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"params: {exc}") from exc
