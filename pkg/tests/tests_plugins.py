"""Importable stand-ins for an external LPIPS scorer."""


def constant_half(a, b):
    return 0.5
