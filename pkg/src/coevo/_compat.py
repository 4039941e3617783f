"""Small import shims with no numerical dependencies."""


def toml_module():
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    return tomllib
