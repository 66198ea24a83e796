from .config import VERSION

__version__ = VERSION
