"""
Recursos del SBI. Los del nodo (flow_table, update_period, key_feature,
neighbors) los monta cada Local Controller; los del controlador (network,
flow_engine) los monta el controlador central.
"""
