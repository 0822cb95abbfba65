import sys

from iotbed.cli import main

sys.exit(main())
