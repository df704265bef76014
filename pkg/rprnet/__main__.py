# Copyright (c) rprnet contributors

import sys

from rprnet.app import main

if __name__ == '__main__':
    sys.exit(main())
