# coding: utf-8

from . import sdm

__version__ = "0.1.0"
