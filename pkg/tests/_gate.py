"""Gate lines recorded by the release checks.

Lives in its own module (not conftest) because two test trees share one
pytest run and a bare `import conftest` is ambiguous between them.
"""

ACCEPTANCE = []
