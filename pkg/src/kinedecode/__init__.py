# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

from ._version import __version__  # noqa: F401
