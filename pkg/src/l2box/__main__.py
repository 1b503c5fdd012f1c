import sys

from l2box.cli import main

sys.exit(main())
