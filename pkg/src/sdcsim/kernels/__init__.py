"""Hot loops, each with a numba build and a numpy twin (see ``sdcsim._accel``)."""
