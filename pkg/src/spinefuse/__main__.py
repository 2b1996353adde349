import sys

from spinefuse.cli import main

sys.exit(main())
