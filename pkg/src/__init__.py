"""
Intercostal ultrasound scan planner: voxel anatomy, probe kinematics and a dueling double DQN
"""

__version__ = "0.1.0"
