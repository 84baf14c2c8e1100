import sys

from soaforge.cli import main

sys.exit(main())
