import sys

from casdm.cli import main

sys.exit(main())
