import sys

from mhfpn.cli import main

sys.exit(main())
