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

import time
import random
import traceback
import functools
from typing import Callable

import numpy as np
import torch
from loguru import logger


def timed(func: Callable) -> Callable:
    """Logs the wall time of every call at debug level and stores the last duration on the wrapper."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.time()
        result = func(*args, **kwargs)
        wrapper.last_duration = time.time() - start_time
        logger.debug(f"Completed {func.__name__} in {wrapper.last_duration:.3f} seconds")
        return result

    wrapper.last_duration = 0.0
    return wrapper


def seed_everything(seed: int):
    """Seeds python, numpy and torch and switches torch to deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def frame_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator per (seed, keys) so results do not depend on call order."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def serialize_exception_to_string(e):
    if isinstance(e, BaseException):
        tb_str = "".join(traceback.format_exception(type(e), e, e.__traceback__))
        return f"Exception Type: {type(e).__name__}, Message: {str(e)}, Traceback: {tb_str}"
    else:
        return e
