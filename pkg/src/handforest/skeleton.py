"""Hand joint naming and the :class:`HandPose` container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
LEVELS = ("mcp", "pip", "dip", "tip")
JOINT_NAMES = ("wrist",) + tuple(f"{f}_{lv}" for f in FINGERS for lv in LEVELS)
N_JOINTS = len(JOINT_NAMES)
WRIST = 0


def joint_index(finger, level):
    """Index of ``finger`` (name or 0-4) at ``level`` ('mcp', 'pip', 'dip', 'tip')."""
    k = FINGERS.index(finger) if isinstance(finger, str) else int(finger)
    return 1 + 4 * k + LEVELS.index(level)


MCP = np.array([joint_index(k, "mcp") for k in range(5)])
PIP = np.array([joint_index(k, "pip") for k in range(5)])
DIP = np.array([joint_index(k, "dip") for k in range(5)])
TIP = np.array([joint_index(k, "tip") for k in range(5)])
PALM = np.concatenate([[WRIST], MCP])


@dataclass
class HandPose:
    joints: np.ndarray  # (21, 3) camera coordinates, mm

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float).reshape(N_JOINTS, 3)

    def __getitem__(self, name):
        return self.joints[JOINT_NAMES.index(name)]

    @property
    def wrist(self):
        return self.joints[WRIST]

    @property
    def mcps(self):
        return self.joints[MCP]

    def bone_lengths(self):
        out = []
        for k in range(5):
            chain = [WRIST, MCP[k], PIP[k], DIP[k], TIP[k]]
            out.extend(np.linalg.norm(self.joints[b] - self.joints[a])
                       for a, b in zip(chain[:-1], chain[1:]))
        return np.array(out)

    def is_valid(self):
        return bool(np.all(np.isfinite(self.joints)) and np.all(self.bone_lengths() > 0))

    def transformed(self, T):
        return HandPose(T.apply(self.joints))
