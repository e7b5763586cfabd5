"""Plain-text reports rendered from Jinja2 templates in ``fedfraud/templates``."""

from pathlib import Path

from jinja2 import Environment, FileSystemLoader, StrictUndefined

_template_dir = Path(__file__).parent / "templates"

_env = Environment(
    loader=FileSystemLoader(str(_template_dir)),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
    undefined=StrictUndefined,
)
_env.filters["num"] = lambda value, digits=6: "-" if value is None else f"{value:.{digits}f}"
_env.filters["signed"] = lambda value, digits=6: f"{value:+.{digits}f}"


def render(template_name: str, **context) -> str:
    return _env.get_template(template_name).render(**context)
