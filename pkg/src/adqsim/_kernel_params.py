# Slot layout of the flat float64 parameter vector consumed by pbd_substep.
DT = 0
ITERATIONS = 1
GX = 2
GY = 3
GZ = 4
COMPLIANCE = 5
CONTACT_COMPLIANCE = 6
RADIUS = 7
CANDIDATE_MARGIN = 8
SURFACE_FRICTION = 9
JOINT_FRICTION = 10
JOINT_DAMPING = 11
VELOCITY_DAMPING = 12
PULL_MASS = 13
JOINT_DAMPING_RATE = 14
JOINT_FRICTION_SPEED = 15
NEIGHBOR_SKIP = 16
MAX_VERTEX_STEP = 17
SIZE = 18
