"""Núcleo de simulación: eventos, canal UDGM, MAC, costos, tráfico y métricas."""
