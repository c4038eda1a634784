import sys

from tsas.cli import main

sys.exit(main())
