"""Visual-inertial-magnetic SLAM toolkit."""
