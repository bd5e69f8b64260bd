import sys

from thorn.cli import main

sys.exit(main())
