"""Report which engine backend is active: python -m bbmlab.engine"""

from . import backend_name

print(f"bbmlab engine backend: {backend_name()}")
