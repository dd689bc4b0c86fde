# The MIT License (MIT)
# Copyright © 2026 nrslam developers

# Permission is hereby granted, free of charge, to any person obtaining a copy of this software and associated
# documentation files (the “Software”), to deal in the Software without restriction, including without limitation
# the rights to use, copy, modify, merge, publish, distribute, sublicense, and/or sell copies of the Software,
# and to permit persons to whom the Software is furnished to do so, subject to the following conditions:

# The above copyright notice and this permission notice shall be included in all copies or substantial portions of
# the Software.

# THE SOFTWARE IS PROVIDED “AS IS”, WITHOUT WARRANTY OF ANY KIND, EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO
# THE WARRANTIES OF MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL
# THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION
# OF CONTRACT, TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER
# DEALINGS IN THE SOFTWARE.


# Define the version of the package.
__version__ = "0.3.1"
version_split = __version__.split(".")
__spec_version__ = (
    (10000 * int(version_split[0]))
    + (100 * int(version_split[1]))
    + (1 * int(version_split[2]))
)

# Import all submodules.
from . import utils
from . import geometry
from . import gaussians
from . import renderer
from . import priors
from . import objectives
from . import tracking
from . import mapping
from . import simulator
from . import evaluation
from . import slam

from .objectives import OBJECTIVES
from .priors import PROVIDERS

# Assert that every registry key is the name its class reports.
for key, cls in OBJECTIVES.items():
    assert cls().name == key, f"OBJECTIVES key {key!r} registers objective named {cls().name!r}"
for key, cls in PROVIDERS.items():
    assert cls.name == key, f"PROVIDERS key {key!r} registers provider named {cls.name!r}"
