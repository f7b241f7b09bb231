#!/usr/bin/env python
import sys

from diffpretrain.main import main

if __name__ == "__main__":
    config = sys.argv[1] if len(sys.argv) > 1 else "configs/desk.ini"
    sys.exit(main(["pipeline", "--config", config, *sys.argv[2:]]))
