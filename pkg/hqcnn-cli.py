#!/usr/bin/env python3
from hqcnn import print_info, script_exit
from hqcnn.cli import main


if __name__ == "__main__":
    try:
        main()
    except KeyboardInterrupt:
        print("")
        print_info("Ctrl+C detected. The running stage was not committed.")
        script_exit(130)
