"""Test suite for CJA SDR Generator"""
