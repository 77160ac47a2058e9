import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import yaml
from pydantic import ValidationError

from project.errors import ScenarioConflictError, ScenarioParseError
from project.scenarios_service import DESCRIPTIONS, LN2, ScenarioSpec, ScenarioVersion, build_scenario

logger = logging.getLogger(__name__)

FLOAT_KEYS = ("lambda", "t_half", "mech_duration", "internal_duration", "obs_look_time", "obs_pi")
TEXT_KEYS = ("name", "version", "ordering")
KNOWN_KEYS = TEXT_KEYS + FLOAT_KEYS

BUILTIN_DIR = Path(__file__).resolve().parent.parent / "scenarios"
SUFFIXES = (".yaml", ".yml")


def _key_lines(text: str, path: str) -> Dict[str, int]:
    """
    Composes the document to check its layout and find the line of every key.
    The mapping must be flat, with known keys given once.
    """
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        raise ScenarioParseError(f"not valid YAML: {e.problem}", path, mark.line + 1 if mark else None) from None
    except yaml.YAMLError as e:
        raise ScenarioParseError(f"not valid YAML: {e}", path) from None
    if root is None:
        return {}
    if not isinstance(root, yaml.MappingNode):
        raise ScenarioParseError("expected a mapping of 'key: value' lines", path, root.start_mark.line + 1)

    lines: Dict[str, int] = {}
    for key_node, value_node in root.value:
        number = key_node.start_mark.line + 1
        if not isinstance(key_node, yaml.ScalarNode):
            raise ScenarioParseError("keys must be plain names", path, number)
        key = key_node.value
        if key not in KNOWN_KEYS:
            raise ScenarioParseError(f"unknown key {key!r} (known: {', '.join(KNOWN_KEYS)})", path, number)
        if key in lines:
            raise ScenarioParseError(f"{key} given twice (first on line {lines[key]})", path, number)
        if not isinstance(value_node, yaml.ScalarNode):
            raise ScenarioParseError(f"{key} must be a single value", path, number)
        lines[key] = number
    return lines


def _error_line(error: dict, lines: Dict[str, int]) -> Union[int, None]:
    loc = error.get("loc") or ()
    if loc and loc[0] in lines:
        return lines[loc[0]]
    message = error.get("msg", "")
    for key in FLOAT_KEYS + TEXT_KEYS:
        if key in lines and key in message:
            return lines[key]
    return lines.get("version")


def parse_scenario_text(text: str, path: str = "<scenario>") -> ScenarioSpec:
    """
    Parses the contents of a scenario file. See `parse_scenario_file` for the schema.
    """
    lines = _key_lines(text, path)
    values: Dict[str, Any] = yaml.safe_load(text) or {}
    if "version" not in values:
        raise ScenarioParseError("missing required key 'version'", path)
    if "lambda" not in values and "t_half" not in values:
        raise ScenarioParseError("one of 'lambda' or 't_half' is required", path)

    data: Dict[str, object] = {}
    for key, value in values.items():
        if value is None:
            raise ScenarioParseError(f"{key} has no value", path, lines[key])
        if key in FLOAT_KEYS:
            # YAML 1.1 reads exponent forms without a dot (1e-3) as text
            try:
                if isinstance(value, bool) or not isinstance(value, (int, float, str)):
                    raise ValueError
                number = float(value)
            except ValueError:
                raise ScenarioParseError(f"{key} must be a number, got {value!r}", path, lines[key]) from None
            if not math.isfinite(number):
                raise ScenarioParseError(f"{key} must be finite, got {value!r}", path, lines[key])
            data[key] = number
        else:
            data[key] = str(value)

    if "lambda" in data and "t_half" in data:
        lam, half = data["lambda"], data["t_half"]
        if lam > 0 and half > 0 and abs(half - LN2 / lam) > 1e-12 * max(1.0, half):
            raise ScenarioConflictError(
                f"lambda={lam!r} and t_half={half!r} disagree; give only one of them", path, lines["t_half"]
            )

    try:
        return ScenarioSpec.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ScenarioParseError(first.get("msg", str(e)), path, _error_line(first, lines)) from e


def parse_scenario_file(path: Union[str, Path]) -> ScenarioSpec:
    """
    Reads a scenario file: a flat YAML mapping, one `key: value` per line. Keys are
    version (required), name, lambda or t_half (at least one; the other is derived as
    t_half = ln2 / lambda), mech_duration, internal_duration, obs_look_time and obs_pi
    (observer versions only, both or neither) and ordering (cat2-natural only).

    Args:
        path (Union[str, Path]): The file.

    Returns:
        ScenarioSpec: The validated configuration.

    Raises:
        OSError: If the file cannot be read.
        ScenarioParseError: On an unknown key, a bad value or a broken invariant, with the line number.
        ScenarioConflictError: If lambda and t_half are both given and disagree.

    Example:
        parse_scenario_file("scenarios/apparatus.yaml").decay_constant
        > 0.6931471805599453
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    spec = parse_scenario_text(text, str(path))
    logger.debug("parsed %s: %s", path, spec.version.value)
    return spec


def check_scenario_file(path: Union[str, Path]) -> ScenarioSpec:
    """
    Parses a scenario file and builds its configuration, so a file passes exactly when the builder accepts it.
    """
    spec = parse_scenario_file(path)
    build_scenario(spec)
    return spec


def builtin_scenarios() -> List[Path]:
    return sorted(p for p in BUILTIN_DIR.iterdir() if p.suffix in SUFFIXES)


def describe_versions() -> List[Tuple[ScenarioVersion, str]]:
    return [(version, DESCRIPTIONS[version]) for version in ScenarioVersion]
