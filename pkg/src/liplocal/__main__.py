import sys

from liplocal.cli import main

sys.exit(main())
