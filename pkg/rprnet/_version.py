# Copyright (c) rprnet contributors

__version__ = VERSION = '0.1.0'
