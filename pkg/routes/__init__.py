# =============================================================================
# ROUTES MODULE - routes/__init__.py
# =============================================================================
# Register all route blueprints here.
# =============================================================================

from .runs_routes import runs_bp

# All blueprints to register with the app
all_blueprints = [
    runs_bp,
]
