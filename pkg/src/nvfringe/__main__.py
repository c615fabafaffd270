import sys

from nvfringe.cli import main

sys.exit(main())
