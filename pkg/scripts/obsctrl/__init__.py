# scripts/obsctrl/__init__.py
"""
obsctrl: síntesis de realimentación lineal por tramos que intercambia
regulación tipo LQR por observabilidad empírica transitoria.
"""

__version__ = "0.1.0"
