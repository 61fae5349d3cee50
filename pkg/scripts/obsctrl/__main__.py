# scripts/obsctrl/__main__.py
from obsctrl.cli import main

if __name__ == "__main__":
    main()
