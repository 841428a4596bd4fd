"""Allow ``python -m hybridcrop``."""

import sys

from .cli import main

sys.exit(main())
