#! /usr/bin/env python
"""Import all top-level modules in peerscore.

This imports all the top-level modules as a smoke test for making sure all needed
dependencies are installed. We use this as basic test before pytest is installed
to make sure that there are no dependencies that we are accidentally relying on
pytest to install for us.
"""

import peerscore.scripts.peerscore  # noqa: F401
from peerscore import (  # noqa: F401
    experiments,
    features,
    model,
    models,
    scoring,
    sensor,
    simulator,
    trace,
    util,
    validation,
    wire,
)

print(f"{__file__}:", "Successfully imported all top-level modules")
