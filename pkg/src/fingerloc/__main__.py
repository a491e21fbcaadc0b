import sys

from fingerloc.cli import main

sys.exit(main())
