import sys

from mtnas.cli import main

sys.exit(main())
