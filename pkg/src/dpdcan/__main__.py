import sys

from dpdcan.cli import main

sys.exit(main())
