"""Embedded descriptors for the builtin networks (generated by scripts/gen_zoo.py)."""
from importlib import resources

NAMES = ("resnet18", "resnet50", "vgg16")

DESCRIPTORS = {name: resources.files(__name__).joinpath(f"{name}.net").read_text()
               for name in NAMES}
