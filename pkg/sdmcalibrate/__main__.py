from sdmcalibrate import sdm

sdm.main()
