from importlib.metadata import version

__version__: str | None
try:
    __version__ = version("the-spatial-speech-toolkit")
except ModuleNotFoundError:
    __version__ = None
