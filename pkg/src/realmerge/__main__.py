# pylint: disable=missing-module-docstring
import sys

from realmerge.cli import main

sys.exit(main())
