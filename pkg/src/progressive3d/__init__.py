"""Single-image textured mesh reconstruction trained with a staged curriculum.

Modules: ``mesh`` (template and deformation), ``render`` (differentiable
rasterizer), ``uv_project`` (inverse rendering to UV space), ``generator``,
``discriminator``, ``losses``, ``trainer``, ``datagen``, ``evaluation``.
"""

__version__ = "0.1.0"
