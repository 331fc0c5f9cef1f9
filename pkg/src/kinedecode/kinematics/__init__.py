# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Trajectory metrics and the 7-DOF arm used to replay decoded trajectories."""
