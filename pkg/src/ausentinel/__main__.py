import sys

from ausentinel.cli import main

sys.exit(main())
