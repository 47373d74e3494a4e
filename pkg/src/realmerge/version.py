# pylint: skip-file
__version__ = "0.1.0"  # pylint: disable=invalid-name
