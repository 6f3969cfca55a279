#!/bin/env python
from qdplace.cli import app


if __name__ == "__main__":
    app()
