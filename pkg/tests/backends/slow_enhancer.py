"""Test backend: hangs long enough to trip adapter timeouts."""
import json
import sys
import time

if __name__ == "__main__":
    op = sys.argv[1] if len(sys.argv) > 1 else ""
    if op == "handshake":
        print(json.dumps({"value_range": [0, 255]}))
    elif op == "enhance":
        time.sleep(10)
    else:
        sys.exit(2)
