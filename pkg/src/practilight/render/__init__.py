from .core import (
    ALL_PASSES,
    CompiledScene,
    DegenerateGeometry,
    IrradianceMap,
    RenderConfig,
    RenderError,
    ShapeMismatch,
    compose_direct_irradiance,
    ggx_brdf,
    linear_to_display,
    render,
)
from .heightfield import HeightField, HeightFieldError, render_heightfield_condition

__all__ = [
    "ALL_PASSES",
    "CompiledScene",
    "DegenerateGeometry",
    "HeightField",
    "HeightFieldError",
    "IrradianceMap",
    "RenderConfig",
    "RenderError",
    "ShapeMismatch",
    "compose_direct_irradiance",
    "ggx_brdf",
    "linear_to_display",
    "render",
    "render_heightfield_condition",
]
