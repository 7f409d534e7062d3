"""
Traffic Models - driver profiles, Intelligent Driver Model and MOBIL lane-change rule
"""

import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

# Hard braking floor applied to every IDM output (m/s^2)
DEFAULT_BRAKING_FLOOR = -9.0
IDM_EXPONENT = 4


@dataclass(frozen=True)
class DriverProfile:
    """IDM/MOBIL parameters of one driving type"""
    desired_speed: float            # v0, m/s
    desired_time_headway: float     # T, s
    jam_distance: float             # s0, m
    max_accel: float                # a, m/s^2
    desired_decel: float            # b, m/s^2 (negative)
    politeness: float               # p
    safe_braking: float             # m/s^2
    accel_threshold: float          # m/s^2
    length: float = 5.0
    width: float = 2.0

    def validate(self) -> List[str]:
        """Validate profile parameters"""
        errors = []

        if self.desired_speed < 0:
            errors.append("desired_speed must be non-negative")
        if self.desired_time_headway < 0:
            errors.append("desired_time_headway must be non-negative")
        if self.max_accel <= 0:
            errors.append("max_accel must be positive")
        if self.desired_decel >= 0:
            errors.append("desired_decel must be negative")
        if not 0.0 <= self.politeness <= 1.0:
            errors.append("politeness must be within [0, 1]")
        if self.length <= 0 or self.width <= 0:
            errors.append("length and width must be positive")

        return errors


DRIVER_PROFILES: Dict[str, DriverProfile] = {
    'timid': DriverProfile(
        desired_speed=27.8, desired_time_headway=2.0, jam_distance=4.0,
        max_accel=0.8, desired_decel=-1.0, politeness=1.0,
        safe_braking=1.0, accel_threshold=0.2, length=5.0, width=2.0,
    ),
    'normal': DriverProfile(
        desired_speed=33.3, desired_time_headway=1.5, jam_distance=2.0,
        max_accel=1.4, desired_decel=-2.0, politeness=0.5,
        safe_braking=2.0, accel_threshold=0.1, length=5.0, width=2.0,
    ),
    'aggressive': DriverProfile(
        desired_speed=38.9, desired_time_headway=1.0, jam_distance=0.0,
        max_accel=2.0, desired_decel=-3.0, politeness=0.0,
        safe_braking=3.0, accel_threshold=0.0, length=5.0, width=2.0,
    ),
    'truck': DriverProfile(
        desired_speed=23.6, desired_time_headway=2.0, jam_distance=4.0,
        max_accel=0.7, desired_decel=-2.0, politeness=1.0,
        safe_braking=1.0, accel_threshold=0.2, length=6.0, width=2.5,
    ),
}


def get_profile(name: str) -> DriverProfile:
    try:
        return DRIVER_PROFILES[name.lower()]
    except KeyError:
        raise ValueError(f"Unknown driver profile '{name}'. "
                         f"Available: {', '.join(sorted(DRIVER_PROFILES))}")


def idm_acceleration(speed: float, gap: float, closing_speed: float,
                     profile: DriverProfile,
                     braking_floor: float = DEFAULT_BRAKING_FLOOR) -> float:
    """IDM acceleration clamped to [braking_floor, max_accel].

    gap is the bumper-to-bumper distance to the leader (math.inf on a free
    road); closing_speed is own speed minus leader speed.
    """
    if gap <= 0:
        return braking_floor

    if profile.desired_speed > 0:
        free_term = (speed / profile.desired_speed) ** IDM_EXPONENT
    else:
        free_term = 1.0

    interaction = 0.0
    if math.isfinite(gap):
        dynamic = speed * profile.desired_time_headway + (
            speed * closing_speed / (2.0 * math.sqrt(profile.max_accel * abs(profile.desired_decel)))
        )
        desired_gap = profile.jam_distance + max(0.0, dynamic)
        interaction = (desired_gap / gap) ** 2

    accel = profile.max_accel * (1.0 - free_term - interaction)
    return min(max(accel, braking_floor), profile.max_accel)


@dataclass
class MobilContext:
    """Neighbours of a vehicle in one lane, gaps measured bumper to bumper"""
    leader_gap: float = math.inf
    leader_speed: float = 0.0
    follower_gap: float = math.inf
    follower_speed: float = 0.0
    follower_profile: Optional[DriverProfile] = None

    @property
    def has_leader(self) -> bool:
        return math.isfinite(self.leader_gap)

    @property
    def has_follower(self) -> bool:
        return math.isfinite(self.follower_gap)


def _follower_gain(context: MobilContext, own_speed: float, own_length: float,
                   joining: bool, braking_floor: float) -> float:
    """Acceleration change of a lane's follower if the vehicle joins or leaves it"""
    if not context.has_follower:
        return 0.0

    profile = context.follower_profile or DRIVER_PROFILES['normal']
    through_gap = math.inf
    through_closing = 0.0
    if context.has_leader:
        through_gap = context.follower_gap + own_length + context.leader_gap
        through_closing = context.follower_speed - context.leader_speed

    behind_own = idm_acceleration(context.follower_speed, context.follower_gap,
                                  context.follower_speed - own_speed, profile, braking_floor)
    behind_leader = idm_acceleration(context.follower_speed, through_gap,
                                     through_closing, profile, braking_floor)

    if joining:
        return behind_own - behind_leader
    return behind_leader - behind_own


def mobil_decision(speed: float, current: MobilContext, target: MobilContext,
                   profile: DriverProfile,
                   braking_floor: float = DEFAULT_BRAKING_FLOOR) -> bool:
    """MOBIL lane-change decision: safety criterion and incentive criterion"""
    # a vehicle already alongside in the target lane blocks the change
    if target.leader_gap <= 0 or target.follower_gap <= 0:
        return False

    if target.has_follower:
        new_follower_profile = target.follower_profile or DRIVER_PROFILES['normal']
        new_follower_accel = idm_acceleration(
            target.follower_speed, target.follower_gap,
            target.follower_speed - speed, new_follower_profile, braking_floor,
        )
        if new_follower_accel < -profile.safe_braking:
            return False

    own_now = idm_acceleration(speed, current.leader_gap,
                               speed - current.leader_speed, profile, braking_floor)
    own_after = idm_acceleration(speed, target.leader_gap,
                                 speed - target.leader_speed, profile, braking_floor)

    others = (_follower_gain(target, speed, profile.length, True, braking_floor)
              + _follower_gain(current, speed, profile.length, False, braking_floor))

    incentive = own_after - own_now + profile.politeness * others
    return incentive > profile.accel_threshold
