import sys

from evdistill.cli import main

sys.exit(main())
