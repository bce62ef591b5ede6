"""Test backend: echoes the PNG back unchanged. Usage: echo_enhancer.py {handshake|enhance}"""
import json
import sys

if __name__ == "__main__":
    op = sys.argv[1] if len(sys.argv) > 1 else ""
    if op == "handshake":
        print(json.dumps({"name": "echo", "value_range": [0, 255]}))
    elif op == "enhance":
        sys.stdout.buffer.write(sys.stdin.buffer.read())
    else:
        sys.exit(2)
